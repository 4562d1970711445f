//! Metrics (AUC, EER, ROC), the domain confusion matrix, and artifact
//! exports (attention maps, pooled embeddings).
//!
//! Scoring uses only the testing-phase graph: backbone G, deepfake attention
//! A_df, and classifier C. The domain and decorrelation parameters cannot
//! influence evaluation scores.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::LoadedDataset;
use crate::error::{DidError, Result};
use crate::graph::Graph;
use crate::losses::{sigmoid, softmax_into};
use crate::model::{
    attention_forward, backbone_forward, classify_df, classify_domain, decompose,
    domain_extract, ModelConfig, ParameterGroups,
};
use crate::nn::Ledger;
use crate::tensor::Tensor;

const SCORE_CHUNK: usize = 32;

/// Per-sample fake probabilities with their labels and domain indices.
pub struct ScoredDataset {
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
    pub domains: Vec<usize>,
}

fn check_input_size(config: &ModelConfig, dataset: &LoadedDataset) -> Result<()> {
    let s = config.backbone.input_size;
    for (i, sample) in dataset.samples.iter().enumerate() {
        if sample.image.shape() != [s, s] {
            return Err(DidError::Config(format!(
                "sample {i} has shape {:?} but the checkpointed config expects {s}x{s}",
                sample.image.shape()
            )));
        }
    }
    Ok(())
}

/// Sigmoid(C(omega; I_df)) for every sample, deterministically, via the
/// inference-only graph.
pub fn score_dataset(
    config: &ModelConfig,
    params: &ParameterGroups,
    dataset: &LoadedDataset,
) -> Result<ScoredDataset> {
    check_input_size(config, dataset)?;
    let mut scores = Vec::with_capacity(dataset.len());
    for chunk in dataset.samples.chunks(SCORE_CHUNK) {
        let refs: Vec<&crate::data::Sample> = chunk.iter().collect();
        let batch = crate::training::BatchData::from_samples(&refs);
        let mut g = Graph::new();
        let mut ledger = Ledger::new();
        let theta = params.theta.register(&mut g, &mut ledger);
        let psi = params.psi.register(&mut g, "psi", &mut ledger);
        let omega = params.omega.register(&mut g, "omega", &mut ledger);
        let images = g.constant(batch.images);
        let i_x = backbone_forward(&mut g, &theta, images);
        let (_m, i_df, _i_os) = decompose(&mut g, &psi, i_x);
        let logits = classify_df(&mut g, &omega, i_df);
        scores.extend(g.value(logits).iter().map(|&s| sigmoid(s)));
    }
    Ok(ScoredDataset {
        scores,
        labels: dataset.samples.iter().map(|s| s.label).collect(),
        domains: dataset.samples.iter().map(|s| s.domain_index()).collect(),
    })
}

fn partition_classes(labels: &[u8]) -> Result<(usize, usize)> {
    let fakes = labels.iter().filter(|&&l| l == 1).count();
    let reals = labels.len() - fakes;
    if fakes == 0 || reals == 0 {
        return Err(DidError::Data(
            "metric needs both classes present".into(),
        ));
    }
    Ok((reals, fakes))
}

/// Exact WMW statistic: the fraction of fake/real pairs ordered correctly,
/// ties credited 0.5. Midrank implementation; the test suite checks it against
/// brute-force pair enumeration.
pub fn compute_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    assert_eq!(scores.len(), labels.len(), "scores/labels length mismatch");
    let (reals, fakes) = partition_classes(labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));
    let mut rank_sum_fakes = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based midrank shared by the tie group [i, j].
        let midrank = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] == 1 {
                rank_sum_fakes += midrank;
            }
        }
        i = j + 1;
    }
    let f = fakes as f64;
    Ok((rank_sum_fakes - f * (f + 1.0) / 2.0) / (f * reals as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

/// ROC points at every distinct score, threshold decreasing; the endpoints
/// (0,0) and (1,1) are always present.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
}

impl RocCurve {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("threshold,fpr,tpr\n");
        for p in &self.points {
            out.push_str(&format!("{},{},{}\n", p.threshold, p.fpr, p.tpr));
        }
        out
    }
}

/// Threshold sweep over distinct scores plus the EER at the interpolated
/// FPR/FNR crossing.
pub fn compute_roc_eer(scores: &[f64], labels: &[u8]) -> Result<(RocCurve, f64)> {
    assert_eq!(scores.len(), labels.len(), "scores/labels length mismatch");
    let (reals, fakes) = partition_classes(labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    // Descending scores: predict fake when score >= threshold.
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite scores"));

    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        while i < order.len() && scores[order[i]] == threshold {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            threshold,
            fpr: fp as f64 / reals as f64,
            tpr: tp as f64 / fakes as f64,
        });
    }
    let curve = RocCurve { points };

    // EER: walk d = FPR - FNR from -1 to +1 and interpolate the sign change.
    let mut eer = 0.5;
    let pts = &curve.points;
    for w in pts.windows(2) {
        let d0 = w[0].fpr + w[0].tpr - 1.0;
        let d1 = w[1].fpr + w[1].tpr - 1.0;
        if d0 == 0.0 {
            eer = (w[0].fpr + (1.0 - w[0].tpr)) / 2.0;
            break;
        }
        if d1 == 0.0 {
            eer = (w[1].fpr + (1.0 - w[1].tpr)) / 2.0;
            break;
        }
        if d0 < 0.0 && d1 > 0.0 {
            let t = -d0 / (d1 - d0);
            let fpr = w[0].fpr + t * (w[1].fpr - w[0].fpr);
            let fnr = (1.0 - w[0].tpr) + t * ((1.0 - w[1].tpr) - (1.0 - w[0].tpr));
            eer = (fpr + fnr) / 2.0;
            break;
        }
    }
    Ok((curve, eer))
}

/// One evaluation run's metrics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub auc: f64,
    pub eer: f64,
    pub sample_count: usize,
    pub roc: RocCurve,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub confusion: Option<Vec<Vec<f64>>>,
}

/// Row-normalized (k+1)x(k+1) confusion of argmax domain predictions.
pub fn domain_confusion(
    config: &ModelConfig,
    params: &ParameterGroups,
    dataset: &LoadedDataset,
) -> Result<Vec<Vec<f64>>> {
    check_input_size(config, dataset)?;
    let classes = config.domain_classes();
    let mut counts = vec![vec![0usize; classes]; classes];
    for chunk in dataset.samples.chunks(SCORE_CHUNK) {
        let refs: Vec<&crate::data::Sample> = chunk.iter().collect();
        let batch = crate::training::BatchData::from_samples(&refs);
        let mut g = Graph::new();
        let mut ledger = Ledger::new();
        let theta = params.theta.register(&mut g, &mut ledger);
        let psi = params.psi.register(&mut g, "psi", &mut ledger);
        let phi_dom = params.phi_dom.register(&mut g, "phi_dom", &mut ledger);
        let omega_bar = params.omega_bar.register(&mut g, "omega_bar", &mut ledger);
        let images = g.constant(batch.images);
        let i_x = backbone_forward(&mut g, &theta, images);
        let (_m, _i_df, i_os) = decompose(&mut g, &psi, i_x);
        let (_m_dom, i_dom) = domain_extract(&mut g, &phi_dom, i_os);
        let logits = classify_domain(&mut g, &omega_bar, i_dom);
        let lv = g.value(logits);
        for (row, &truth) in lv
            .data()
            .chunks_exact(classes)
            .zip(batch.domain_targets.iter())
        {
            let mut probs = vec![0.0; classes];
            softmax_into(row, &mut probs);
            let pred = probs
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite probs"))
                .map(|(i, _)| i)
                .expect("nonempty row");
            counts[truth][pred] += 1;
        }
    }
    Ok(counts
        .into_iter()
        .map(|row| {
            let total: usize = row.iter().sum();
            if total == 0 {
                vec![0.0; classes]
            } else {
                row.into_iter().map(|c| c as f64 / total as f64).collect()
            }
        })
        .collect())
}

/// Builds a metrics report for a scored dataset.
pub fn metrics_report(scored: &ScoredDataset, confusion: Option<Vec<Vec<f64>>>) -> Result<MetricsReport> {
    let auc = compute_auc(&scored.scores, &scored.labels)?;
    let (roc, eer) = compute_roc_eer(&scored.scores, &scored.labels)?;
    Ok(MetricsReport {
        auc,
        eer,
        sample_count: scored.scores.len(),
        roc,
        confusion,
    })
}

fn upsample_to(t: &Tensor, size: usize) -> Tensor {
    // Bilinear, same convention as preprocessing.
    let (h, w) = (t.shape()[0], t.shape()[1]);
    if h == size && w == size {
        return t.clone();
    }
    let scale_y = h as f64 / size as f64;
    let scale_x = w as f64 / size as f64;
    let mut data = Vec::with_capacity(size * size);
    for dy in 0..size {
        let sy = ((dy as f64 + 0.5) * scale_y - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = sy - y0 as f64;
        for dx in 0..size {
            let sx = ((dx as f64 + 0.5) * scale_x - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = sx - x0 as f64;
            let top = t.data()[y0 * w + x0] * (1.0 - wx) + t.data()[y0 * w + x1] * wx;
            let bot = t.data()[y1 * w + x0] * (1.0 - wx) + t.data()[y1 * w + x1] * wx;
            data.push(top * (1.0 - wy) + bot * wy);
        }
    }
    Tensor::from_vec(&[size, size], data)
}

fn channel_average(map: &Tensor) -> Tensor {
    // [1, c, h, w] -> [h, w]
    let (c, h, w) = (map.shape()[1], map.shape()[2], map.shape()[3]);
    let mut data = vec![0.0; h * w];
    for ci in 0..c {
        for (o, &v) in data
            .iter_mut()
            .zip(map.data()[ci * h * w..(ci + 1) * h * w].iter())
        {
            *o += v;
        }
    }
    for v in &mut data {
        *v /= c as f64;
    }
    Tensor::from_vec(&[h, w], data)
}

/// Per-sample channel-averaged attention maps, upsampled to the input size:
/// `<id>_input.png`, `<id>_mdf.png`, `<id>_mdom.png` per sample. Returns the
/// number of files written.
pub fn export_attention_maps(
    config: &ModelConfig,
    params: &ParameterGroups,
    dataset: &LoadedDataset,
    out_dir: &Path,
) -> Result<usize> {
    check_input_size(config, dataset)?;
    fs::create_dir_all(out_dir)
        .map_err(|e| DidError::io(format!("creating {}", out_dir.display()), e))?;
    let size = config.backbone.input_size;
    let mut written = 0;
    for (idx, sample) in dataset.samples.iter().enumerate() {
        let (m_df, m_dom) = attention_maps_for_sample(params, sample)?;
        let id = format!("{idx:05}");
        for (suffix, map) in [
            ("input", sample.image.clone()),
            ("mdf", upsample_to(&m_df, size)),
            ("mdom", upsample_to(&m_dom, size)),
        ] {
            let path = out_dir.join(format!("{id}_{suffix}.png"));
            crate::data::tensor_to_gray_image(&map)
                .save(&path)
                .map_err(|e| DidError::Data(format!("writing {}: {e}", path.display())))?;
            written += 1;
        }
    }
    Ok(written)
}

/// Channel-averaged (M_df, M_dom) for one sample at feature resolution.
pub fn attention_maps_for_sample(
    params: &ParameterGroups,
    sample: &crate::data::Sample,
) -> Result<(Tensor, Tensor)> {
    let refs = [sample];
    let batch = crate::training::BatchData::from_samples(&refs);
    let mut g = Graph::new();
    let mut ledger = Ledger::new();
    let theta = params.theta.register(&mut g, &mut ledger);
    let psi = params.psi.register(&mut g, "psi", &mut ledger);
    let phi_dom = params.phi_dom.register(&mut g, "phi_dom", &mut ledger);
    let images = g.constant(batch.images);
    let i_x = backbone_forward(&mut g, &theta, images);
    let m_df = attention_forward(&mut g, &psi, i_x);
    let inv = g.one_minus(m_df);
    let i_os = g.mul(inv, i_x);
    let m_dom = attention_forward(&mut g, &phi_dom, i_os);
    Ok((
        channel_average(g.value(m_df)),
        channel_average(g.value(m_dom)),
    ))
}

/// CSV of pooled I_df and I_dom vectors: id,label,domain,idf_0..,idom_0..
pub fn export_embeddings(
    config: &ModelConfig,
    params: &ParameterGroups,
    dataset: &LoadedDataset,
    out_path: &Path,
) -> Result<()> {
    check_input_size(config, dataset)?;
    let c = config.backbone.out_channels();
    let mut out = String::from("id,label,domain");
    for i in 0..c {
        out.push_str(&format!(",idf_{i}"));
    }
    for i in 0..c {
        out.push_str(&format!(",idom_{i}"));
    }
    out.push('\n');

    for (start, chunk) in dataset
        .samples
        .chunks(SCORE_CHUNK)
        .enumerate()
        .map(|(ci, ch)| (ci * SCORE_CHUNK, ch))
    {
        let refs: Vec<&crate::data::Sample> = chunk.iter().collect();
        let batch = crate::training::BatchData::from_samples(&refs);
        let mut g = Graph::new();
        let mut ledger = Ledger::new();
        let theta = params.theta.register(&mut g, &mut ledger);
        let psi = params.psi.register(&mut g, "psi", &mut ledger);
        let phi_dom = params.phi_dom.register(&mut g, "phi_dom", &mut ledger);
        let images = g.constant(batch.images);
        let i_x = backbone_forward(&mut g, &theta, images);
        let (_m, i_df, i_os) = decompose(&mut g, &psi, i_x);
        let (_m_dom, i_dom) = domain_extract(&mut g, &phi_dom, i_os);
        let df_pooled = g.gap_spatial(i_df);
        let dom_pooled = g.gap_spatial(i_dom);
        let dfv = g.value(df_pooled);
        let domv = g.value(dom_pooled);
        for (row, sample) in chunk.iter().enumerate() {
            let idx = start + row;
            out.push_str(&format!(
                "{},{},{}",
                dataset.ids[idx],
                sample.label,
                sample.domain_index()
            ));
            for &v in &dfv.data()[row * c..(row + 1) * c] {
                out.push_str(&format!(",{v}"));
            }
            for &v in &domv.data()[row * c..(row + 1) * c] {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
    }
    fs::write(out_path, out)
        .map_err(|e| DidError::io(format!("writing {}", out_path.display()), e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Sample;
    use crate::model::BackboneConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    /// Independent oracle: brute-force pair enumeration with 0.5 tie credit.
    fn auc_brute_force(scores: &[f64], labels: &[u8]) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for (i, &si) in scores.iter().enumerate() {
            if labels[i] != 1 {
                continue;
            }
            for (j, &sj) in scores.iter().enumerate() {
                if labels[j] != 0 {
                    continue;
                }
                pairs += 1.0;
                if si > sj {
                    wins += 1.0;
                } else if si == sj {
                    wins += 0.5;
                }
            }
        }
        wins / pairs
    }

    #[test]
    fn auc_matches_brute_force_exactly() {
        let mut rng = ChaCha12Rng::seed_from_u64(31);
        for trial in 0..1000 {
            let n = rng.gen_range(2..=64);
            let mut labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2) as u8).collect();
            labels[0] = 0;
            labels[n - 1] = 1;
            // Quantized scores force plenty of ties.
            let scores: Vec<f64> = (0..n)
                .map(|_| (rng.gen_range(0.0_f64..1.0) * 8.0).round() / 8.0)
                .collect();
            let fast = compute_auc(&scores, &labels).unwrap();
            let slow = auc_brute_force(&scores, &labels);
            assert_eq!(fast, slow, "trial {trial} differs");
        }
    }

    #[test]
    fn auc_frozen_examples() {
        assert_eq!(compute_auc(&[0.9, 0.2, 0.5], &[1, 1, 0]).unwrap(), 0.5);
        assert_eq!(compute_auc(&[0.9, 0.8, 0.1], &[1, 1, 0]).unwrap(), 1.0);
        assert_eq!(compute_auc(&[0.5, 0.5], &[1, 0]).unwrap(), 0.5);
        assert!(compute_auc(&[0.5, 0.6], &[1, 1]).is_err());
    }

    #[test]
    fn auc_invariant_under_monotone_transforms() {
        let mut rng = ChaCha12Rng::seed_from_u64(37);
        for _ in 0..50 {
            let n = rng.gen_range(4..40);
            let mut labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2) as u8).collect();
            labels[0] = 0;
            labels[1] = 1;
            let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let base = compute_auc(&scores, &labels).unwrap();
            let squashed: Vec<f64> = scores.iter().map(|&s| sigmoid(2.0 * s + 1.0)).collect();
            assert!((base - compute_auc(&squashed, &labels).unwrap()).abs() < 1e-12);
            // Reversing signs flips the statistic.
            let flipped: Vec<f64> = scores.iter().map(|&s| -s).collect();
            assert!((compute_auc(&flipped, &labels).unwrap() - (1.0 - base)).abs() < 1e-12);
        }
    }

    #[test]
    fn roc_has_endpoints_and_monotone_rates() {
        let scores = [0.9, 0.3, 0.7, 0.1, 0.7];
        let labels = [1, 1, 0, 0, 1];
        let (curve, _) = compute_roc_eer(&scores, &labels).unwrap();
        let first = curve.points.first().unwrap();
        let last = curve.points.last().unwrap();
        assert_eq!((first.fpr, first.tpr), (0.0, 0.0));
        assert_eq!((last.fpr, last.tpr), (1.0, 1.0));
        for w in curve.points.windows(2) {
            assert!(w[1].threshold < w[0].threshold);
            assert!(w[1].fpr >= w[0].fpr);
            assert!(w[1].tpr >= w[0].tpr);
        }
    }

    #[test]
    fn eer_conventions() {
        // Perfect separation.
        let (_, eer) = compute_roc_eer(&[0.9, 0.8, 0.2, 0.1], &[1, 1, 0, 0]).unwrap();
        assert_eq!(eer, 0.0);
        // Constant scores degenerate to the diagonal.
        let (_, eer) = compute_roc_eer(&[0.5, 0.5, 0.5, 0.5], &[1, 1, 0, 0]).unwrap();
        assert!((eer - 0.5).abs() < 1e-12);
        // Lumpy 4-point curve crosses exactly at 0.5.
        let (_, eer) = compute_roc_eer(&[0.9, 0.3, 0.7, 0.1], &[1, 1, 0, 0]).unwrap();
        assert!((eer - 0.5).abs() < 1e-12);
    }

    fn tiny_setup(seed: u64) -> (ModelConfig, ParameterGroups, LoadedDataset) {
        let config = ModelConfig::new(
            BackboneConfig {
                input_size: 16,
                channel_widths: vec![4, 4],
            },
            2,
        )
        .unwrap();
        let params = ParameterGroups::init(&config, seed).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0xabc);
        let mut samples = Vec::new();
        let mut ids = Vec::new();
        for i in 0..10 {
            let data = (0..16 * 16).map(|_| rng.gen_range(0.0..1.0)).collect();
            let label = u8::from(i % 2 == 0);
            let mut domain = vec![0u8; 3];
            domain[if label == 0 { 0 } else { 1 + i % 2 }] = 1;
            samples.push(Sample::new(Tensor::from_vec(&[16, 16], data), label, domain).unwrap());
            ids.push(format!("s{i}"));
        }
        (config, params, LoadedDataset::from_samples(samples, ids, 2))
    }

    #[test]
    fn scores_are_probabilities_and_deterministic() {
        let (config, params, dataset) = tiny_setup(41);
        let a = score_dataset(&config, &params, &dataset).unwrap();
        let b = score_dataset(&config, &params, &dataset).unwrap();
        assert_eq!(a.scores, b.scores);
        assert!(a.scores.iter().all(|&s| s > 0.0 && s < 1.0));
        assert_eq!(a.scores.len(), 10);
    }

    #[test]
    fn scores_ignore_non_inference_parameters() {
        let (config, mut params, dataset) = tiny_setup(43);
        let before = score_dataset(&config, &params, &dataset).unwrap().scores;
        for group in [
            crate::model::Group::PhiDom,
            crate::model::Group::PhiT,
            crate::model::Group::OmegaBar,
        ] {
            for (_, t) in params.named_tensors_mut(group) {
                for v in t.data_mut() {
                    *v += 123.456;
                }
            }
        }
        let after = score_dataset(&config, &params, &dataset).unwrap().scores;
        assert_eq!(before, after, "inference graph leaked a frozen branch");
    }

    #[test]
    fn confusion_rows_normalize() {
        let (config, params, dataset) = tiny_setup(47);
        let confusion = domain_confusion(&config, &params, &dataset).unwrap();
        assert_eq!(confusion.len(), 3);
        for row in &confusion {
            let sum: f64 = row.iter().sum();
            assert!(sum == 0.0 || (sum - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn export_counts_and_formats() {
        let (config, params, dataset) = tiny_setup(53);
        let dir = tempfile::tempdir().unwrap();
        let written = export_attention_maps(&config, &params, &dataset, dir.path()).unwrap();
        assert_eq!(written, 30, "3 files per sample");
        assert!(dir.path().join("00000_mdf.png").is_file());
        assert!(dir.path().join("00000_mdom.png").is_file());
        assert!(dir.path().join("00000_input.png").is_file());

        let csv_path = dir.path().join("emb.csv");
        export_embeddings(&config, &params, &dataset, &csv_path).unwrap();
        let text = fs::read_to_string(&csv_path).unwrap();
        let mut lines = text.lines();
        let header = lines.next().unwrap();
        let c = config.backbone.out_channels();
        assert_eq!(header.split(',').count(), 3 + 2 * c);
        assert!(header.starts_with("id,label,domain,idf_0"));
        assert_eq!(lines.count(), dataset.len());
    }

    #[test]
    fn zero_attention_exports_mid_gray() {
        let (config, mut params, dataset) = tiny_setup(59);
        let c = config.backbone.out_channels();
        params.psi.ch_fc2 = crate::nn::LinearParams {
            weight: Tensor::zeros(&[c, c]),
            bias: Tensor::zeros(&[c]),
        };
        params.psi.sp_conv = crate::nn::ConvParams {
            weight: Tensor::zeros(&[1, 3, 3, 3]),
            bias: Tensor::zeros(&[1]),
        };
        let (m_df, _) = attention_maps_for_sample(&params, &dataset.samples[0]).unwrap();
        assert!(m_df.iter().all(|&v| v == 0.5));
        let img = crate::data::tensor_to_gray_image(&m_df);
        assert!(img.pixels().all(|p| p.0[0] == 128));
    }
}
