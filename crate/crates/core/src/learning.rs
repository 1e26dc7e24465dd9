//! Triplet ranking objectives, in-batch negative mining and the Adam
//! optimizer with global-norm clipping.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::Scorer;
use crate::encoders::{project_regions, ImageFeatures, ModelParams, SentenceEncoder, WordSequence};
use crate::error::{Result, ScanError};
use crate::linalg::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossMode {
    /// Hinge summed over every in-batch negative.
    AllNegatives,
    /// Hinge on the single hardest negative per direction.
    HardestNegatives,
}

impl std::str::FromStr for LossMode {
    type Err = ScanError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "hard" | "hardest" | "hardest-negatives" => Ok(LossMode::HardestNegatives),
            "all" | "sum" | "all-negatives" => Ok(LossMode::AllNegatives),
            other => Err(ScanError::Config(format!("unknown loss mode '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub margin: f64,
    pub mode: LossMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            margin: 0.2,
            mode: LossMode::HardestNegatives,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            return Err(ScanError::Config(format!("margin must be >= 0, got {}", self.margin)));
        }
        Ok(())
    }
}

/// `B × B` scores of a batch; entry `(a, b)` is image `a` against
/// sentence `b`, positives on the diagonal.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMatrix(Matrix);

impl ScoreMatrix {
    pub fn new(m: Matrix) -> Result<Self> {
        if m.rows() != m.cols() {
            return Err(ScanError::dim(format!("score matrix must be square, got {:?}", m.shape())));
        }
        m.check_finite("score matrix")?;
        Ok(ScoreMatrix(m))
    }

    pub fn size(&self) -> usize {
        self.0.rows()
    }

    pub fn get(&self, image: usize, sentence: usize) -> f64 {
        self.0.get(image, sentence)
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }
}

/// Scores every embedded image against every embedded sentence.
pub fn score_matrix(vs: &[Matrix], es: &[Matrix], scorer: &Scorer, parallel: bool) -> Result<ScoreMatrix> {
    if vs.len() != es.len() {
        return Err(ScanError::dim(format!("{} images vs {} sentences", vs.len(), es.len())));
    }
    let b = vs.len();
    let cell = |idx: usize| scorer.score(&vs[idx / b], &es[idx % b]);
    let vals: Vec<f64> = if parallel {
        (0..b * b).into_par_iter().map(cell).collect::<Result<_>>()?
    } else {
        (0..b * b).map(cell).collect::<Result<_>>()?
    };
    ScoreMatrix::new(Matrix::from_vec(b, b, vals)?)
}

/// Encodes a batch of aligned pairs and scores all combinations.
pub fn batch_scores(
    images: &[ImageFeatures],
    sentences: &[WordSequence],
    params: &ModelParams,
    encoder: SentenceEncoder,
    scorer: &Scorer,
) -> Result<ScoreMatrix> {
    let vs = images
        .iter()
        .map(|f| project_regions(f, params))
        .collect::<Result<Vec<_>>>()?;
    let es = sentences
        .iter()
        .map(|s| encoder.encode(s, params))
        .collect::<Result<Vec<_>>>()?;
    score_matrix(&vs, &es, scorer, false)
}

fn hinge(x: f64) -> f64 {
    x.max(0.0)
}

/// Summed hinge over all negatives; zero for batches of one.
///
/// Terms are grouped per positive (sentence side, then image side) the same
/// way as in [`triplet_loss_hard`], which keeps `hard <= all` true after
/// rounding as well.
pub fn triplet_loss_all(s: &ScoreMatrix, cfg: &LossConfig) -> f64 {
    let b = s.size();
    let mut total = 0.0;
    for p in 0..b {
        let pos = s.get(p, p);
        let mut sentences = 0.0;
        let mut images = 0.0;
        for q in (0..b).filter(|&q| q != p) {
            sentences += hinge(cfg.margin - pos + s.get(p, q));
            images += hinge(cfg.margin - pos + s.get(q, p));
        }
        total += sentences + images;
    }
    total
}

/// For each positive `p`, the hardest negative sentence for image `p`
/// and the hardest negative image for sentence `p`. Ties go to the
/// lowest index.
pub fn hardest_negatives(s: &ScoreMatrix) -> Result<Vec<(usize, usize)>> {
    let b = s.size();
    if b < 2 {
        return Err(ScanError::Domain(format!("hard-negative mining needs B >= 2, got {b}")));
    }
    let argmax_excluding = |p: usize, f: &dyn Fn(usize) -> f64| {
        let mut best: Option<usize> = None;
        for q in (0..b).filter(|&q| q != p) {
            if best.is_none_or(|bq| f(q) > f(bq)) {
                best = Some(q);
            }
        }
        best.expect("b >= 2")
    };
    Ok((0..b)
        .map(|p| {
            let sentence = argmax_excluding(p, &|q| s.get(p, q));
            let image = argmax_excluding(p, &|q| s.get(q, p));
            (sentence, image)
        })
        .collect())
}

pub fn triplet_loss_hard(s: &ScoreMatrix, cfg: &LossConfig) -> Result<f64> {
    let mined = hardest_negatives(s)?;
    Ok(mined
        .iter()
        .enumerate()
        .map(|(p, &(ts, ti))| {
            let pos = s.get(p, p);
            hinge(cfg.margin - pos + s.get(p, ts)) + hinge(cfg.margin - pos + s.get(ti, p))
        })
        .fold(0.0, |acc, x| acc + x))
}

pub fn triplet_loss(s: &ScoreMatrix, cfg: &LossConfig) -> Result<f64> {
    match cfg.mode {
        LossMode::AllNegatives => Ok(triplet_loss_all(s, cfg)),
        LossMode::HardestNegatives => triplet_loss_hard(s, cfg),
    }
}

/// Loss value and its (sub)gradient w.r.t. every score.
pub fn loss_with_grad(s: &ScoreMatrix, cfg: &LossConfig) -> Result<(f64, Matrix)> {
    let b = s.size();
    let mut g = Matrix::zeros(b, b);
    // Adds one hinge term to `acc` and its subgradient to `g`.
    let term = |g: &mut Matrix, acc: &mut f64, p: usize, neg: (usize, usize)| {
        let x = cfg.margin - s.get(p, p) + s.get(neg.0, neg.1);
        if x > 0.0 {
            *acc += x;
            g.set(p, p, g.get(p, p) - 1.0);
            g.set(neg.0, neg.1, g.get(neg.0, neg.1) + 1.0);
        }
    };
    let mut total = 0.0;
    match cfg.mode {
        LossMode::AllNegatives => {
            for p in 0..b {
                let (mut sentences, mut images) = (0.0, 0.0);
                for q in (0..b).filter(|&q| q != p) {
                    term(&mut g, &mut sentences, p, (p, q));
                    term(&mut g, &mut images, p, (q, p));
                }
                total += sentences + images;
            }
        }
        LossMode::HardestNegatives => {
            for (p, (ts, ti)) in hardest_negatives(s)?.into_iter().enumerate() {
                let (mut sentence, mut image) = (0.0, 0.0);
                term(&mut g, &mut sentence, p, (p, ts));
                term(&mut g, &mut image, p, (ti, p));
                total += sentence + image;
            }
        }
    }
    Ok((total, g))
}

/// Loss of one batch computed entirely on the plain forward path.
pub fn batch_loss(
    images: &[ImageFeatures],
    sentences: &[WordSequence],
    params: &ModelParams,
    encoder: SentenceEncoder,
    scorer: &Scorer,
    cfg: &LossConfig,
) -> Result<f64> {
    triplet_loss(&batch_scores(images, sentences, params, encoder, scorer)?, cfg)
}

/// Piecewise-constant learning rate: `initial` until `decay_epoch`, then
/// `initial * decay_factor`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub initial: f64,
    /// Zero-based epoch at which the decayed rate takes over.
    pub decay_epoch: usize,
    pub decay_factor: f64,
}

impl LrSchedule {
    pub fn rate(&self, epoch: usize) -> f64 {
        if epoch >= self.decay_epoch {
            self.initial * self.decay_factor
        } else {
            self.initial
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub first_moment: Vec<Matrix>,
    pub second_moment: Vec<Matrix>,
    pub schedule: LrSchedule,
    pub clip_norm: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimizerState {
    pub fn new(params: &ModelParams, schedule: LrSchedule, clip_norm: f64) -> Self {
        let zeros: Vec<Matrix> = params
            .tensors()
            .iter()
            .map(|t| Matrix::zeros(t.rows(), t.cols()))
            .collect();
        OptimizerState {
            step: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
            schedule,
            clip_norm,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

pub fn global_norm(grads: &[Matrix]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` in place so their joint L2 norm is at most
/// `max_norm`; returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Matrix], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= scale;
            }
        }
    }
    norm
}

/// Clips, then applies one bias-corrected Adam update at rate `lr`.
/// Returns the pre-clip gradient norm.
pub fn adam_step(
    state: &mut OptimizerState,
    params: &mut ModelParams,
    mut grads: Vec<Matrix>,
    lr: f64,
) -> Result<f64> {
    let mut tensors = params.tensors_mut();
    if grads.len() != tensors.len() || state.first_moment.len() != tensors.len() {
        return Err(ScanError::dim(format!(
            "{} gradients for {} parameters",
            grads.len(),
            tensors.len()
        )));
    }
    for (i, (g, p)) in grads.iter().zip(&tensors).enumerate() {
        if g.shape() != p.shape() {
            return Err(ScanError::dim(format!(
                "gradient {} has shape {:?}, parameter {:?}",
                ModelParams::names()[i],
                g.shape(),
                p.shape()
            )));
        }
        if let Some(pos) = g.data().iter().position(|v| !v.is_finite()) {
            return Err(ScanError::Numeric(format!(
                "non-finite gradient in {} at flat index {pos}",
                ModelParams::names()[i]
            )));
        }
    }
    let norm = clip_global_norm(&mut grads, state.clip_norm);
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for (i, p) in tensors.iter_mut().enumerate() {
        let g = grads[i].data();
        let m = state.first_moment[i].data_mut();
        for (mj, gj) in m.iter_mut().zip(g) {
            *mj = state.beta1 * *mj + (1.0 - state.beta1) * gj;
        }
        let v = state.second_moment[i].data_mut();
        for (vj, gj) in v.iter_mut().zip(g) {
            *vj = state.beta2 * *vj + (1.0 - state.beta2) * gj * gj;
        }
        let (m, v) = (state.first_moment[i].data(), state.second_moment[i].data());
        for ((pj, mj), vj) in p.data_mut().iter_mut().zip(m).zip(v) {
            let m_hat = mj / bc1;
            let v_hat = vj / bc2;
            *pj -= lr * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
    Ok(norm)
}
