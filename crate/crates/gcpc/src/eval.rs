//! Downstream evaluation: frame-synchronous greedy transducer decoding, WER
//! with substitution/insertion/deletion decomposition, relative reductions
//! against a baseline, and representation analysis (PCA projection plus a
//! between/within-class scatter ratio).

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::nets::{self, TransducerSpec};
use crate::numcore::{Graph, ParameterStore, Tensor};

// ---- greedy decoding ---------------------------------------------------------

/// Greedy transducer search: at each (t, u) take the argmax symbol; blank
/// advances time, a label advances the output and the prediction state.
/// Non-blank emissions per frame are capped to break degenerate loops.
pub fn greedy_decode(
    store: &ParameterStore,
    spec: &TransducerSpec,
    features: &Tensor,
    emission_cap: usize,
) -> Result<Vec<u16>> {
    if emission_cap == 0 {
        return Err(Error::Contract("emission cap must be >= 1".into()));
    }
    let (t_len, _) = features.dim2()?;
    let blank = spec.blank_id();
    let mut g = Graph::new();
    let (_, enc) = nets::run_encoder(&mut g, store, &spec.encoder, features)?;
    let w_enc = g.param(store, "joint.w_enc")?;
    let w_pred = g.param(store, "joint.w_pred")?;
    let bias = g.param(store, "joint.b")?;
    let enc_proj = g.matmul_bt(enc, w_enc)?;

    let emb = g.param(store, "pred.emb")?;
    let w_ih = g.param(store, "pred.lstm.0.w_ih")?;
    let w_hh = g.param(store, "pred.lstm.0.w_hh")?;
    let b_lstm = g.param(store, "pred.lstm.0.b")?;
    let mut h = g.zeros(vec![spec.pred_width]);
    let mut c = g.zeros(vec![spec.pred_width]);
    // Joint contribution of the current prediction state.
    let mut pred_proj = {
        let p = g.matvec(w_pred, h)?;
        g.add(p, bias)?
    };

    let mut hyp = Vec::new();
    for t in 0..t_len {
        let enc_row = g.row(enc_proj, t)?;
        let mut emitted = 0;
        loop {
            let logits = g.add(enc_row, pred_proj)?;
            let data = g.value(logits).data();
            let best = data
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite logits"))
                .map(|(i, _)| i)
                .expect("non-empty logits");
            if best == blank || emitted >= emission_cap {
                break;
            }
            hyp.push(best as u16);
            emitted += 1;
            let x = g.row(emb, best)?;
            let (h2, c2) = nets::lstm_cell_step(&mut g, w_ih, w_hh, b_lstm, x, h, c)?;
            h = h2;
            c = c2;
            pred_proj = {
                let p = g.matvec(w_pred, h)?;
                g.add(p, bias)?
            };
        }
    }
    Ok(hyp)
}

// ---- alignment and WER ---------------------------------------------------------

/// Substitution / insertion / deletion counts from a minimal-cost alignment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct AlignmentCounts {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub ref_len: usize,
}

impl AlignmentCounts {
    pub fn total_errors(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }

    pub fn accumulate(&mut self, other: &AlignmentCounts) {
        self.substitutions += other.substitutions;
        self.insertions += other.insertions;
        self.deletions += other.deletions;
        self.ref_len += other.ref_len;
    }

    pub fn wer(&self) -> Result<f64> {
        if self.ref_len == 0 {
            return Err(Error::Contract("WER undefined for empty reference".into()));
        }
        Ok(self.total_errors() as f64 / self.ref_len as f64)
    }
}

/// Levenshtein alignment with unit costs. When costs tie the backtrace
/// prefers substitution over insertion over deletion, making the S/I/D
/// decomposition deterministic; the total always equals the edit distance.
pub fn align_and_count_errors(reference: &[u16], hypothesis: &[u16]) -> AlignmentCounts {
    let n = reference.len();
    let m = hypothesis.len();
    let mut dist = vec![vec![0usize; m + 1]; n + 1];
    for (i, row) in dist.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=m {
        dist[0][j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub_cost = usize::from(reference[i - 1] != hypothesis[j - 1]);
            dist[i][j] = (dist[i - 1][j - 1] + sub_cost)
                .min(dist[i][j - 1] + 1)
                .min(dist[i - 1][j] + 1);
        }
    }
    let mut counts = AlignmentCounts {
        ref_len: n,
        ..AlignmentCounts::default()
    };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        if i > 0 && j > 0 {
            let sub_cost = usize::from(reference[i - 1] != hypothesis[j - 1]);
            if dist[i][j] == dist[i - 1][j - 1] + sub_cost {
                counts.substitutions += sub_cost;
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if j > 0 && dist[i][j] == dist[i][j - 1] + 1 {
            counts.insertions += 1;
            j -= 1;
            continue;
        }
        counts.deletions += 1;
        i -= 1;
    }
    debug_assert_eq!(counts.total_errors(), dist[n][m]);
    counts
}

/// WER plus relative reductions against a baseline (positive = improvement).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WerReport {
    pub wer: f64,
    pub werr_pct: f64,
    /// Relative reduction of the substitution error rate, when defined.
    pub subr_pct: Option<f64>,
    pub insr_pct: Option<f64>,
    pub delr_pct: Option<f64>,
}

fn relative_reduction(base: f64, sys: f64) -> Option<f64> {
    if base > 0.0 {
        Some(100.0 * (base - sys) / base)
    } else {
        None
    }
}

/// WER = (S+D+I)/N and per-type relative reductions versus a baseline
/// evaluated on the same test set.
pub fn compute_wer_werr(system: &AlignmentCounts, baseline: &AlignmentCounts) -> Result<WerReport> {
    if system.ref_len == 0 || baseline.ref_len == 0 {
        return Err(Error::Contract("WER undefined for empty reference".into()));
    }
    let wer = system.wer()?;
    let base_wer = baseline.wer()?;
    if base_wer == 0.0 {
        return Err(Error::Contract(
            "WERR undefined against a zero-WER baseline".into(),
        ));
    }
    let n_sys = system.ref_len as f64;
    let n_base = baseline.ref_len as f64;
    Ok(WerReport {
        wer,
        werr_pct: 100.0 * (base_wer - wer) / base_wer,
        subr_pct: relative_reduction(
            baseline.substitutions as f64 / n_base,
            system.substitutions as f64 / n_sys,
        ),
        insr_pct: relative_reduction(
            baseline.insertions as f64 / n_base,
            system.insertions as f64 / n_sys,
        ),
        delr_pct: relative_reduction(
            baseline.deletions as f64 / n_base,
            system.deletions as f64 / n_sys,
        ),
    })
}

// ---- representation analysis ----------------------------------------------------

/// Frame-level embeddings with one phone label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub rows: Tensor,
    pub labels: Vec<u16>,
}

impl EmbeddingMatrix {
    pub fn new(rows: Tensor, labels: Vec<u16>) -> Result<Self> {
        let (n, _) = rows.dim2()?;
        if labels.len() != n {
            return Err(Error::Dimension(format!(
                "{} labels for {n} embedding rows",
                labels.len()
            )));
        }
        Ok(Self { rows, labels })
    }
}

/// Center the data and project onto the top `out_dim` principal directions.
/// Components use a deterministic sign (largest-magnitude coordinate is
/// positive); rank-deficient data degenerates to the available rank with
/// zero-filled trailing columns.
pub fn pca_project(embeddings: &Tensor, out_dim: usize) -> Result<Tensor> {
    let (n, d) = embeddings.dim2()?;
    if n <= out_dim {
        return Err(Error::Contract(format!(
            "need more than {out_dim} samples, got {n}"
        )));
    }
    let mut centered = DMatrix::<f64>::zeros(n, d);
    let mut means = vec![0.0; d];
    for i in 0..n {
        for (j, m) in means.iter_mut().enumerate() {
            *m += embeddings.row(i)[j];
        }
    }
    means.iter_mut().for_each(|m| *m /= n as f64);
    for i in 0..n {
        for j in 0..d {
            centered[(i, j)] = embeddings.row(i)[j] - means[j];
        }
    }
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    let eig = nalgebra::SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .expect("finite eigenvalues")
    });

    let total_var: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();
    let rank_tol = total_var * 1e-12;
    let mut components = DMatrix::<f64>::zeros(d, out_dim);
    for (col, &idx) in order.iter().take(out_dim).enumerate() {
        if eig.eigenvalues[idx].max(0.0) <= rank_tol {
            continue; // beyond the data's rank: leave the column zero
        }
        let mut v: Vec<f64> = eig.eigenvectors.column(idx).iter().cloned().collect();
        let lead = v
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).expect("finite"))
            .map(|(i, _)| i)
            .unwrap_or(0);
        if v[lead] < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        for (r, x) in v.iter().enumerate() {
            components[(r, col)] = *x;
        }
    }
    let projected = centered * components;
    Tensor::matrix(n, out_dim, projected.as_slice().to_vec()).and_then(|t| {
        // nalgebra stores column-major; reorder to row-major.
        let mut data = vec![0.0; n * out_dim];
        for i in 0..n {
            for j in 0..out_dim {
                data[i * out_dim + j] = t.data()[j * n + i];
            }
        }
        Tensor::matrix(n, out_dim, data)
    })
}

/// trace(S_W^+ S_B): between-class scatter against within-class scatter,
/// with a pseudo-inverse for rank-deficient within-class scatter. Higher
/// means better separated classes.
pub fn fisher_ratio(embeddings: &EmbeddingMatrix) -> Result<f64> {
    let (n, d) = embeddings.rows.dim2()?;
    let mut by_class: std::collections::BTreeMap<u16, Vec<usize>> = Default::default();
    for (i, &l) in embeddings.labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    if by_class.len() < 2 {
        return Err(Error::Contract("fisher_ratio needs at least 2 classes".into()));
    }
    for (label, rows) in &by_class {
        if rows.len() < 2 {
            return Err(Error::Contract(format!(
                "class {label} has {} sample(s), need at least 2",
                rows.len()
            )));
        }
    }
    let mut global = vec![0.0; d];
    for i in 0..n {
        for (j, gm) in global.iter_mut().enumerate() {
            *gm += embeddings.rows.row(i)[j];
        }
    }
    global.iter_mut().for_each(|g| *g /= n as f64);

    let mut s_w = DMatrix::<f64>::zeros(d, d);
    let mut s_b = DMatrix::<f64>::zeros(d, d);
    for rows in by_class.values() {
        let mut mean = vec![0.0; d];
        for &i in rows {
            for (j, m) in mean.iter_mut().enumerate() {
                *m += embeddings.rows.row(i)[j];
            }
        }
        mean.iter_mut().for_each(|m| *m /= rows.len() as f64);
        for &i in rows {
            let x = embeddings.rows.row(i);
            for a in 0..d {
                let da = x[a] - mean[a];
                for b in 0..d {
                    s_w[(a, b)] += da * (x[b] - mean[b]);
                }
            }
        }
        for a in 0..d {
            let da = mean[a] - global[a];
            for b in 0..d {
                s_b[(a, b)] += rows.len() as f64 * da * (mean[b] - global[b]);
            }
        }
    }
    let svd = s_w.svd(true, true);
    let pinv = svd
        .pseudo_inverse(1e-10)
        .map_err(|e| Error::Numeric(format!("pseudo-inverse failed: {e}")))?;
    Ok((pinv * s_b).trace())
}
