//! Text-to-visual attention statistics and their exports.
//!
//! Both statistics read the attention of the gated pass, restricted to word
//! query rows `1..=n` and visual key columns `n+2..n+2+m`, and average over
//! layers and heads.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoder::AttentionTensor;
use crate::error::{Error, Result};
use crate::tensor::Real;
use crate::train::{NerPrediction, PreparedNer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subset {
    Relevant,
    Irrelevant,
}

impl Subset {
    pub fn from_relevant(relevant: bool) -> Self {
        if relevant {
            Subset::Relevant
        } else {
            Subset::Irrelevant
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Subset::Relevant => "relevant",
            Subset::Irrelevant => "irrelevant",
        }
    }
}

impl fmt::Display for Subset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionStats {
    pub example_id: String,
    pub variant: String,
    pub r: Real,
    pub s_tv: Real,
    pub blocks: Vec<Real>,
    pub subset: Subset,
}

fn check_layout(att: &AttentionTensor, n: usize, m: usize) {
    assert_eq!(
        att.len,
        n + 2 + m,
        "attention over {} positions cannot hold {n} words and {m} blocks",
        att.len
    );
}

/// Total word-to-visual attention mass averaged over layers and heads.
pub fn compute_stv(att: &AttentionTensor, n: usize, m: usize) -> Real {
    compute_block_attention(att, n, m).iter().sum()
}

/// Per-block attention summed over words, averaged over layers and heads.
pub fn compute_block_attention(att: &AttentionTensor, n: usize, m: usize) -> Vec<Real> {
    check_layout(att, n, m);
    let mut out = vec![0.0; m];
    for l in 0..att.layers {
        for h in 0..att.heads {
            let map = att.map(l, h);
            for q in 1..=n {
                let row = &map[q * att.len + n + 2..q * att.len + n + 2 + m];
                for (o, a) in out.iter_mut().zip(row) {
                    *o += a;
                }
            }
        }
    }
    let lh = (att.layers * att.heads) as Real;
    out.iter_mut().for_each(|v| *v /= lh);
    out
}

/// Statistics for every prediction, in order.
pub fn collect_stats(variant: &str, data: &[PreparedNer], preds: &[NerPrediction]) -> Result<Vec<AttentionStats>> {
    if data.len() != preds.len() {
        return Err(Error::invalid(
            "collect_stats",
            format!("{} examples but {} predictions", data.len(), preds.len()),
        ));
    }
    Ok(data
        .iter()
        .zip(preds)
        .enumerate()
        .map(|(i, (ex, p))| {
            let (n, m) = (ex.seq.subwords(), ex.seq.blocks());
            let blocks = compute_block_attention(&p.attention, n, m);
            AttentionStats {
                example_id: format!("{i:05}"),
                variant: variant.to_string(),
                r: p.r,
                s_tv: blocks.iter().sum(),
                blocks,
                subset: Subset::from_relevant(p.relevant),
            }
        })
        .collect())
}

/// Colour of `t` in `[0, 1]` on a linear blue-to-red ramp.
pub fn ramp(t: Real) -> [u8; 3] {
    let t = t.clamp(0.0, 1.0);
    let red = (255.0 * t).round() as u8;
    [red, 0, 255 - red]
}

/// Files written by [`export_heatmap`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeatmapFiles {
    pub json: PathBuf,
    pub ppm: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapJson {
    pub grid_h: usize,
    pub grid_w: usize,
    pub values: Vec<Vec<Real>>,
}

/// Writes `<stem>.json` with the raw grid and `<stem>.ppm` (binary P6),
/// min-max normalized and upscaled by `scale` in both directions.
pub fn export_heatmap(
    values: &[Real],
    grid_h: usize,
    grid_w: usize,
    stem: &Path,
    scale: usize,
) -> Result<HeatmapFiles> {
    if values.len() != grid_h * grid_w {
        return Err(Error::invalid(
            "export_heatmap",
            format!("{} values for a {grid_h}x{grid_w} grid", values.len()),
        ));
    }
    if scale == 0 {
        return Err(Error::invalid("export_heatmap", "scale must be positive"));
    }
    let json = stem.with_extension("json");
    let ppm = stem.with_extension("ppm");

    let doc = HeatmapJson {
        grid_h,
        grid_w,
        values: values.chunks(grid_w.max(1)).map(<[Real]>::to_vec).collect(),
    };
    let text = serde_json::to_string(&doc).expect("plain data serializes");
    fs::write(&json, text).map_err(|e| Error::io(&json, e))?;

    let lo = values.iter().copied().fold(Real::INFINITY, Real::min);
    let hi = values.iter().copied().fold(Real::NEG_INFINITY, Real::max);
    let span = hi - lo;
    let (w, h) = (grid_w * scale, grid_h * scale);
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            let v = values[(y / scale) * grid_w + x / scale];
            let t = if span > 0.0 { (v - lo) / span } else { 0.0 };
            bytes.extend_from_slice(&ramp(t));
        }
    }
    fs::write(&ppm, bytes).map_err(|e| Error::io(&ppm, e))?;
    Ok(HeatmapFiles { json, ppm })
}

pub fn read_heatmap_json(path: &Path) -> Result<HeatmapJson> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SubsetSummary {
    pub count: usize,
    pub mean_s_tv: Real,
    pub mean_r: Real,
}

/// Variant, then subset. Subsets with no examples are absent.
pub type DistributionSummary = BTreeMap<String, BTreeMap<Subset, SubsetSummary>>;

pub fn summarize(stats: &[AttentionStats]) -> DistributionSummary {
    let mut sums: BTreeMap<String, BTreeMap<Subset, (usize, Real, Real)>> = BTreeMap::new();
    for s in stats {
        let e = sums.entry(s.variant.clone()).or_default().entry(s.subset).or_default();
        e.0 += 1;
        e.1 += s.s_tv;
        e.2 += s.r;
    }
    sums.into_iter()
        .map(|(variant, subsets)| {
            let subsets = subsets
                .into_iter()
                .map(|(k, (count, stv, r))| {
                    let c = count as Real;
                    (
                        k,
                        SubsetSummary {
                            count,
                            mean_s_tv: stv / c,
                            mean_r: r / c,
                        },
                    )
                })
                .collect();
            (variant, subsets)
        })
        .collect()
}

/// Writes the per-example CSV and the summary JSON; returns the summary.
pub fn export_distribution(stats: &[AttentionStats], csv: &Path, summary: &Path) -> Result<DistributionSummary> {
    let mut out = Vec::new();
    writeln!(out, "example_id,variant,r,s_tv,subset").expect("write to Vec");
    for s in stats {
        writeln!(out, "{},{},{},{},{}", s.example_id, s.variant, s.r, s.s_tv, s.subset).expect("write to Vec");
    }
    fs::write(csv, out).map_err(|e| Error::io(csv, e))?;
    let sum = summarize(stats);
    let text = serde_json::to_string_pretty(&sum).expect("plain data serializes") + "\n";
    fs::write(summary, text).map_err(|e| Error::io(summary, e))?;
    Ok(sum)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng as _, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_attention(layers: usize, heads: usize, len: usize, seed: u64) -> AttentionTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = Vec::with_capacity(layers * heads * len * len);
        for _ in 0..layers * heads * len {
            let row: Vec<Real> = (0..len).map(|_| rng.gen::<Real>()).collect();
            let z: Real = row.iter().sum();
            values.extend(row.iter().map(|v| v / z));
        }
        AttentionTensor::new(layers, heads, len, values).unwrap()
    }

    fn naive_stv(att: &AttentionTensor, n: usize, m: usize) -> Real {
        let mut total = 0.0;
        for l in 0..att.layers {
            for h in 0..att.heads {
                for i in 0..n {
                    for j in 0..m {
                        total += att.get(l, h, 1 + i, n + 2 + j);
                    }
                }
            }
        }
        total / (att.layers * att.heads) as Real
    }

    #[test]
    fn uniform_attention_is_analytic() {
        for (n, m) in [(5, 9), (12, 49), (1, 1)] {
            let s = n + 2 + m;
            let att = AttentionTensor::uniform(2, 3, s);
            let stv = compute_stv(&att, n, m);
            assert!((stv - (n * m) as Real / s as Real).abs() < 1e-12);
            for a in compute_block_attention(&att, n, m) {
                assert!((a - n as Real / s as Real).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn no_visual_mass_gives_zero() {
        let (n, m) = (3, 4);
        let len = n + 2 + m;
        let mut values = vec![0.0; 2 * 2 * len * len];
        for lh in 0..4 {
            for q in 0..len {
                values[(lh * len + q) * len] = 1.0;
            }
        }
        let att = AttentionTensor::new(2, 2, len, values).unwrap();
        assert_eq!(compute_stv(&att, n, m), 0.0);
    }

    #[test]
    fn one_word_on_block_five() {
        let (n, m, layers, heads) = (4, 9, 2, 2);
        let len = n + 2 + m;
        let mut values = vec![0.0; layers * heads * len * len];
        for lh in 0..layers * heads {
            for q in 0..len {
                let k = if q == 2 { n + 2 + 4 } else { 0 };
                values[(lh * len + q) * len + k] = 1.0;
            }
        }
        let att = AttentionTensor::new(layers, heads, len, values).unwrap();
        let a = compute_block_attention(&att, n, m);
        for (j, v) in a.iter().enumerate() {
            assert_eq!(*v, if j == 4 { 1.0 } else { 0.0 });
        }
        assert_eq!(compute_stv(&att, n, m), 1.0);
    }

    proptest! {
        #[test]
        fn blocks_sum_to_stv_and_match_naive(n in 1usize..6, m in 1usize..10, seed in 0u64..1000) {
            let att = random_attention(2, 2, n + 2 + m, seed);
            let stv = compute_stv(&att, n, m);
            let blocks = compute_block_attention(&att, n, m);
            prop_assert!((blocks.iter().sum::<Real>() - stv).abs() < 1e-12);
            prop_assert!((naive_stv(&att, n, m) - stv).abs() < 1e-12);
            prop_assert!(stv >= 0.0 && stv <= n as Real + 1e-12);
        }
    }

    #[test]
    fn heatmap_shape_and_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let values: Vec<Real> = (0..49).map(|i| (i as Real * 0.37).sin() / 7.0).collect();
        let files = export_heatmap(&values, 7, 7, &dir.path().join("ex"), 3).unwrap();
        let back = read_heatmap_json(&files.json).unwrap();
        assert_eq!(back.values.concat(), values);
        let ppm = fs::read(&files.ppm).unwrap();
        let header = b"P6\n21 21\n255\n";
        assert_eq!(&ppm[..header.len()], header);
        assert_eq!(ppm.len(), header.len() + 21 * 21 * 3);
        assert!(export_heatmap(&values, 6, 7, &dir.path().join("bad"), 1).is_err());
    }

    #[test]
    fn constant_heatmap_renders_at_ramp_bottom() {
        let dir = tempfile::tempdir().unwrap();
        let files = export_heatmap(&[0.2; 4], 2, 2, &dir.path().join("c"), 1).unwrap();
        let ppm = fs::read(&files.ppm).unwrap();
        let pixels = &ppm[b"P6\n2 2\n255\n".len()..];
        assert!(pixels.chunks(3).all(|p| p == ramp(0.0)));
    }

    fn stat(variant: &str, r: Real, s_tv: Real) -> AttentionStats {
        AttentionStats {
            example_id: "0".into(),
            variant: variant.into(),
            r,
            s_tv,
            blocks: vec![s_tv],
            subset: Subset::from_relevant(r > 0.5),
        }
    }

    #[test]
    fn empty_distribution_has_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let (csv, js) = (dir.path().join("d.csv"), dir.path().join("s.json"));
        let sum = export_distribution(&[], &csv, &js).unwrap();
        assert!(sum.is_empty());
        assert_eq!(fs::read_to_string(&csv).unwrap(), "example_id,variant,r,s_tv,subset\n");
    }

    #[test]
    fn summary_means_by_variant_and_subset() {
        let stats = vec![
            stat("full", 0.1, 0.2),
            stat("full", 0.3, 0.4),
            stat("full", 0.9, 1.0),
            stat("ablated", 0.2, 0.5),
        ];
        let sum = summarize(&stats);
        let full = &sum["full"];
        assert_eq!(full[&Subset::Irrelevant].count, 2);
        assert!((full[&Subset::Irrelevant].mean_s_tv - 0.3).abs() < 1e-15);
        assert!((full[&Subset::Irrelevant].mean_r - 0.2).abs() < 1e-15);
        assert_eq!(full[&Subset::Relevant].mean_s_tv, 1.0);
        assert!(!sum["ablated"].contains_key(&Subset::Relevant));
    }
}
