//! Image-sentence similarity via stacked cross attention, plus the
//! attention-free Sum-Max baseline.
//!
//! Everything here is a pure function of the region embeddings `V`
//! (`k × h`) and the word embeddings `E` (`n × h`). The differentiable
//! twin of this module lives in [`crate::graph`].

use serde::{Deserialize, Serialize};

use crate::error::{Result, ScanError};
use crate::linalg::{cosine, softmax_scaled, Matrix, NORM_EPS};
use crate::tape::log_sum_exp;

/// Which side attends to the other.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    /// Words attend over regions; relevance is pooled over words.
    TextImage,
    /// Regions attend over words; relevance is pooled over regions.
    ImageText,
}

impl Direction {
    pub fn short_name(self) -> &'static str {
        match self {
            Direction::TextImage => "t-i",
            Direction::ImageText => "i-t",
        }
    }
}

impl std::str::FromStr for Direction {
    type Err = ScanError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "t2i" | "t-i" | "text-image" | "textimage" => Ok(Direction::TextImage),
            "i2t" | "i-t" | "image-text" | "imagetext" => Ok(Direction::ImageText),
            other => Err(ScanError::Config(format!("unknown direction '{other}'"))),
        }
    }
}

/// Final reduction of the relevance vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    Lse,
    Avg,
    Sum,
    Max,
}

impl std::str::FromStr for Pooling {
    type Err = ScanError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lse" => Ok(Pooling::Lse),
            "avg" | "mean" => Ok(Pooling::Avg),
            "sum" => Ok(Pooling::Sum),
            "max" => Ok(Pooling::Max),
            other => Err(ScanError::Config(format!("unknown pooling '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanConfig {
    pub direction: Direction,
    pub pooling: Pooling,
    /// Inverse softmax temperature.
    pub lambda1: f64,
    /// LSE sharpness; ignored unless `pooling` is [`Pooling::Lse`].
    pub lambda2: f64,
    /// Keep only the first `max_regions` regions (file order).
    #[serde(default)]
    pub max_regions: Option<usize>,
}

impl ScanConfig {
    pub fn new(direction: Direction, pooling: Pooling, lambda1: f64, lambda2: f64) -> Self {
        ScanConfig {
            direction,
            pooling,
            lambda1,
            lambda2,
            max_regions: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 > 0.0 && self.lambda1.is_finite()) {
            return Err(ScanError::Config(format!(
                "lambda1 must be positive, got {}",
                self.lambda1
            )));
        }
        if self.pooling == Pooling::Lse && !(self.lambda2 > 0.0 && self.lambda2.is_finite()) {
            return Err(ScanError::Config(format!(
                "lambda2 must be positive for LSE pooling, got {}",
                self.lambda2
            )));
        }
        if self.max_regions == Some(0) {
            return Err(ScanError::Config("max_regions must be at least 1".into()));
        }
        Ok(())
    }
}

/// Everything computed while scoring one pair.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AttentionTrace {
    pub direction: Direction,
    /// Cosine similarities, `k × n`.
    pub sim: Matrix,
    /// Thresholded and normalized similarities, `k × n`.
    pub sim_normalized: Matrix,
    /// Attention weights, `k × n`. Rows sum to one for image-text,
    /// columns sum to one for text-image.
    pub weights: Matrix,
    /// One attended vector per anchor (regions for image-text, words
    /// for text-image).
    pub attended: Matrix,
    pub relevance: Vec<f64>,
    pub score: f64,
}

/// Normalization axis for [`threshold_normalize`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormAxis {
    /// Each column (one word, all regions) gets unit norm.
    OverRegions,
    /// Each row (one region, all words) gets unit norm.
    OverWords,
}

/// Cosine similarity of every region against every word.
pub fn similarity_matrix(v: &Matrix, e: &Matrix) -> Result<Matrix> {
    if v.cols() != e.cols() {
        return Err(ScanError::dim(format!(
            "region width {} vs word width {}",
            v.cols(),
            e.cols()
        )));
    }
    if v.rows() == 0 || e.rows() == 0 {
        return Err(ScanError::Domain("need at least one region and one word".into()));
    }
    let mut s = Matrix::zeros(v.rows(), e.rows());
    for i in 0..v.rows() {
        for j in 0..e.rows() {
            s.set(i, j, cosine(v.row(i), e.row(j)));
        }
    }
    Ok(s)
}

/// Clamps at zero and L2-normalizes each slice along `axis`.
/// Slices with no positive entry become all zeros.
pub fn threshold_normalize(s: &Matrix, axis: NormAxis) -> Matrix {
    let clamped = s.map(|x| x.max(0.0));
    let mut out = clamped.clone();
    match axis {
        NormAxis::OverWords => {
            for i in 0..s.rows() {
                let d = crate::linalg::norm2(clamped.row(i)).max(NORM_EPS);
                out.row_mut(i).iter_mut().for_each(|x| *x /= d);
            }
        }
        NormAxis::OverRegions => {
            for j in 0..s.cols() {
                let d = crate::linalg::norm2(&clamped.col(j)).max(NORM_EPS);
                for i in 0..s.rows() {
                    out.set(i, j, clamped.get(i, j) / d);
                }
            }
        }
    }
    out
}

/// Stage one: attention over the other modality.
///
/// `s_norm` is always `k × n`. For image-text, `targets` are the word
/// embeddings and each region row is softmaxed over words; for
/// text-image, `targets` are the region embeddings and each word column
/// is softmaxed over regions. Returns the attended vectors (one per
/// anchor) and the `k × n` weights.
pub fn attend(
    s_norm: &Matrix,
    targets: &Matrix,
    lambda1: f64,
    direction: Direction,
) -> Result<(Matrix, Matrix)> {
    let (k, n) = s_norm.shape();
    match direction {
        Direction::ImageText => {
            if targets.rows() != n {
                return Err(ScanError::dim(format!(
                    "{n} similarity columns but {} word vectors",
                    targets.rows()
                )));
            }
            let mut w = Matrix::zeros(k, n);
            for i in 0..k {
                let row = softmax_scaled(s_norm.row(i), lambda1)?;
                w.row_mut(i).copy_from_slice(&row);
            }
            let attended = w.matmul(targets)?;
            Ok((attended, w))
        }
        Direction::TextImage => {
            if targets.rows() != k {
                return Err(ScanError::dim(format!(
                    "{k} similarity rows but {} region vectors",
                    targets.rows()
                )));
            }
            let mut w = Matrix::zeros(k, n);
            for j in 0..n {
                let col = softmax_scaled(&s_norm.col(j), lambda1)?;
                for (i, a) in col.into_iter().enumerate() {
                    w.set(i, j, a);
                }
            }
            let attended = w.transpose().matmul(targets)?;
            Ok((attended, w))
        }
    }
}

/// Stage two: cosine between each anchor row and its attended row.
pub fn relevance(anchor: &Matrix, attended: &Matrix) -> Result<Vec<f64>> {
    if anchor.shape() != attended.shape() {
        return Err(ScanError::dim(format!(
            "anchor {:?} vs attended {:?}",
            anchor.shape(),
            attended.shape()
        )));
    }
    Ok((0..anchor.rows())
        .map(|r| cosine(anchor.row(r), attended.row(r)))
        .collect())
}

pub fn pool(relevance: &[f64], pooling: Pooling, lambda2: f64) -> Result<f64> {
    if relevance.is_empty() {
        return Err(ScanError::Domain("cannot pool an empty relevance vector".into()));
    }
    Ok(match pooling {
        Pooling::Lse => {
            if !(lambda2 > 0.0) {
                return Err(ScanError::Domain(format!("lambda2 must be positive, got {lambda2}")));
            }
            log_sum_exp(relevance, lambda2)
        }
        Pooling::Avg => relevance.iter().sum::<f64>() / relevance.len() as f64,
        Pooling::Sum => relevance.iter().sum(),
        Pooling::Max => relevance.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b)),
    })
}

/// Full pipeline for one (image, sentence) pair.
pub fn score_pair(v: &Matrix, e: &Matrix, cfg: &ScanConfig) -> Result<AttentionTrace> {
    cfg.validate()?;
    let v = match cfg.max_regions {
        Some(m) if m < v.rows() => v.head_rows(m),
        _ => v.clone(),
    };
    let sim = similarity_matrix(&v, e)?;
    let (axis, targets, anchor) = match cfg.direction {
        Direction::ImageText => (NormAxis::OverRegions, e, &v),
        Direction::TextImage => (NormAxis::OverWords, &v, e),
    };
    let sim_normalized = threshold_normalize(&sim, axis);
    let (attended, weights) = attend(&sim_normalized, targets, cfg.lambda1, cfg.direction)?;
    let rel = relevance(anchor, &attended)?;
    let score = pool(&rel, cfg.pooling, cfg.lambda2)?;
    Ok(AttentionTrace {
        direction: cfg.direction,
        sim,
        sim_normalized,
        weights,
        attended,
        relevance: rel,
        score,
    })
}

/// Region-word similarity used by the Sum-Max baseline.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SumMaxSimilarity {
    #[default]
    Dot,
    Cosine,
}

/// Sum-Max with raw dot products.
pub fn sum_max_score(v: &Matrix, e: &Matrix, direction: Direction) -> Result<f64> {
    sum_max_score_with(v, e, direction, SumMaxSimilarity::Dot)
}

/// Text-image: Σ_j max_i s_ij. Image-text: Σ_i max_j s_ij.
pub fn sum_max_score_with(
    v: &Matrix,
    e: &Matrix,
    direction: Direction,
    similarity: SumMaxSimilarity,
) -> Result<f64> {
    if v.cols() != e.cols() {
        return Err(ScanError::dim(format!(
            "region width {} vs word width {}",
            v.cols(),
            e.cols()
        )));
    }
    if v.rows() == 0 || e.rows() == 0 {
        return Err(ScanError::Domain("need at least one region and one word".into()));
    }
    let s = match similarity {
        SumMaxSimilarity::Dot => v.matmul_bt(e)?,
        SumMaxSimilarity::Cosine => similarity_matrix(v, e)?,
    };
    let s = match direction {
        Direction::ImageText => s,
        Direction::TextImage => s.transpose(),
    };
    Ok((0..s.rows())
        .map(|r| s.row(r).iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b)))
        .sum())
}

/// Mean of several models' scores for the same pair.
pub fn ensemble_score(scores: &[f64]) -> Result<f64> {
    if scores.is_empty() {
        return Err(ScanError::Domain("ensemble of zero scores".into()));
    }
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Settings for the Sum-Max baseline.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SumMaxConfig {
    pub direction: Direction,
    #[serde(default)]
    pub similarity: SumMaxSimilarity,
    #[serde(default)]
    pub max_regions: Option<usize>,
}

/// The pair-scoring function a model is trained and evaluated with.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Scorer {
    Scan(ScanConfig),
    SumMax(SumMaxConfig),
}

impl Scorer {
    pub fn validate(&self) -> Result<()> {
        match self {
            Scorer::Scan(cfg) => cfg.validate(),
            Scorer::SumMax(cfg) if cfg.max_regions == Some(0) => {
                Err(ScanError::Config("max_regions must be at least 1".into()))
            }
            Scorer::SumMax(_) => Ok(()),
        }
    }

    pub fn score(&self, v: &Matrix, e: &Matrix) -> Result<f64> {
        match self {
            Scorer::Scan(cfg) => Ok(score_pair(v, e, cfg)?.score),
            Scorer::SumMax(cfg) => {
                let v = match cfg.max_regions {
                    Some(m) if m < v.rows() => v.head_rows(m),
                    _ => v.clone(),
                };
                sum_max_score_with(&v, e, cfg.direction, cfg.similarity)
            }
        }
    }

    pub fn describe(&self) -> String {
        match self {
            Scorer::Scan(c) => {
                let pooling = match c.pooling {
                    Pooling::Lse => "LSE",
                    Pooling::Avg => "AVG",
                    Pooling::Sum => "SUM",
                    Pooling::Max => "MAX",
                };
                if c.pooling == Pooling::Lse {
                    format!(
                        "SCAN {} {pooling} (lambda1={}, lambda2={})",
                        c.direction.short_name(),
                        c.lambda1,
                        c.lambda2
                    )
                } else {
                    format!("SCAN {} {pooling} (lambda1={})", c.direction.short_name(), c.lambda1)
                }
            }
            Scorer::SumMax(c) => format!("Sum-Max {}", c.direction.short_name()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn similarity_basic_cases() {
        let s = similarity_matrix(&m(&[&[1.0, 0.0]]), &m(&[&[1.0, 0.0]])).unwrap();
        assert_eq!(s.data(), &[1.0]);
        let s = similarity_matrix(&m(&[&[1.0, 0.0]]), &m(&[&[0.0, 1.0]])).unwrap();
        assert_eq!(s.data(), &[0.0]);
        assert!(matches!(
            similarity_matrix(&Matrix::zeros(2, 3), &Matrix::zeros(2, 4)),
            Err(ScanError::Dimension(_))
        ));
    }

    #[test]
    fn similarity_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let v = random(&mut rng, 3, 8);
        let e = random(&mut rng, 4, 8);
        let s = similarity_matrix(&v, &e).unwrap();
        for i in 0..3 {
            for j in 0..4 {
                let (mut d, mut a, mut b) = (0.0, 0.0, 0.0);
                for t in 0..8 {
                    d += v.get(i, t) * e.get(j, t);
                    a += v.get(i, t) * v.get(i, t);
                    b += e.get(j, t) * e.get(j, t);
                }
                assert!((s.get(i, j) - d / (a.sqrt() * b.sqrt())).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn threshold_normalize_cases() {
        let col = m(&[&[3.0], &[4.0]]);
        assert_eq!(threshold_normalize(&col, NormAxis::OverRegions).data(), &[0.6, 0.8]);
        let neg = m(&[&[-1.0], &[-2.0]]);
        assert_eq!(threshold_normalize(&neg, NormAxis::OverRegions).data(), &[0.0, 0.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s = random(&mut rng, 5, 6);
        let over_regions = threshold_normalize(&s, NormAxis::OverRegions);
        for j in 0..6 {
            let c = over_regions.col(j);
            let n = crate::linalg::norm2(&c);
            if s.col(j).iter().any(|&x| x > 0.0) {
                assert!((n - 1.0).abs() <= 1e-12);
            } else {
                assert_eq!(n, 0.0);
            }
        }
        let over_words = threshold_normalize(&s, NormAxis::OverWords);
        for i in 0..5 {
            if s.row(i).iter().any(|&x| x > 0.0) {
                assert!((crate::linalg::norm2(over_words.row(i)) - 1.0).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn single_word_attends_to_itself() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let e = random(&mut rng, 1, 5);
        let s = random(&mut rng, 4, 1);
        let (att, w) = attend(&s, &e, 4.0, Direction::ImageText).unwrap();
        for i in 0..4 {
            assert_eq!(att.row(i), e.row(0));
            assert_eq!(w.get(i, 0), 1.0);
        }
    }

    #[test]
    fn uniform_row_gives_mean_word() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let e = random(&mut rng, 3, 4);
        let s = Matrix::filled(2, 3, 0.4);
        let (att, _) = attend(&s, &e, 9.0, Direction::ImageText).unwrap();
        for t in 0..4 {
            let mean = (e.get(0, t) + e.get(1, t) + e.get(2, t)) / 3.0;
            assert!((att.get(0, t) - mean).abs() <= 1e-15);
        }
    }

    #[test]
    fn attend_matches_weighted_sum_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let (k, n, h) = (4, 5, 6);
        let s = random(&mut rng, k, n);
        let e = random(&mut rng, n, h);
        let v = random(&mut rng, k, h);
        let lambda = 4.0;

        let (att, _) = attend(&s, &e, lambda, Direction::ImageText).unwrap();
        for i in 0..k {
            let z: f64 = (0..n).map(|j| (lambda * s.get(i, j)).exp()).sum();
            for t in 0..h {
                let want: f64 = (0..n).map(|j| (lambda * s.get(i, j)).exp() / z * e.get(j, t)).sum();
                assert!((att.get(i, t) - want).abs() <= 1e-12);
            }
        }

        let (att, w) = attend(&s, &v, lambda, Direction::TextImage).unwrap();
        for j in 0..n {
            let z: f64 = (0..k).map(|i| (lambda * s.get(i, j)).exp()).sum();
            assert!(((0..k).map(|i| w.get(i, j)).sum::<f64>() - 1.0).abs() <= 1e-12);
            for t in 0..h {
                let want: f64 = (0..k).map(|i| (lambda * s.get(i, j)).exp() / z * v.get(i, t)).sum();
                assert!((att.get(j, t) - want).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn relevance_cases() {
        let a = m(&[&[1.0, 2.0, -1.0], &[0.5, 0.0, 3.0]]);
        let r = relevance(&a, &a).unwrap();
        assert!(r.iter().all(|x| (x - 1.0).abs() < 1e-15));
        let r = relevance(&a, &a.scale(-1.0)).unwrap();
        assert!(r.iter().all(|x| (x + 1.0).abs() < 1e-15));

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&mut rng, 3, 7);
        let y = random(&mut rng, 3, 7);
        let r = relevance(&x, &y).unwrap();
        for i in 0..3 {
            let d: f64 = (0..7).map(|t| x.get(i, t) * y.get(i, t)).sum();
            let nx: f64 = (0..7).map(|t| x.get(i, t).powi(2)).sum::<f64>().sqrt();
            let ny: f64 = (0..7).map(|t| y.get(i, t).powi(2)).sum::<f64>().sqrt();
            assert!((r[i] - d / (nx * ny)).abs() <= 1e-12);
        }
    }

    #[test]
    fn pooling_cases() {
        for p in [Pooling::Lse, Pooling::Avg, Pooling::Max] {
            assert!((pool(&[0.37], p, 6.0).unwrap() - 0.37).abs() < 1e-15);
        }
        assert_eq!(pool(&[0.37], Pooling::Sum, 6.0).unwrap(), 0.37);
        for mcount in [2usize, 5, 36] {
            let r = vec![0.3; mcount];
            let want = 0.3 + (mcount as f64).ln() / 5.0;
            assert!((pool(&r, Pooling::Lse, 5.0).unwrap() - want).abs() < 1e-14);
        }
        // mpmath, 50 digits: log(exp(1.2) + exp(4.8)) / 6
        let lse = pool(&[0.2, 0.8], Pooling::Lse, 6.0).unwrap();
        assert!((lse - 0.80449284883470134341).abs() < 1e-15);
        assert!(matches!(pool(&[], Pooling::Avg, 1.0), Err(ScanError::Domain(_))));
    }

    #[test]
    fn perfect_single_alignment_scores_one() {
        let v = m(&[&[1.0, 0.0, 0.0]]);
        for direction in [Direction::ImageText, Direction::TextImage] {
            let cfg = ScanConfig::new(direction, Pooling::Avg, 4.0, 6.0);
            let t = score_pair(&v, &v, &cfg).unwrap();
            assert!((t.score - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn truncation_keeps_leading_regions() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let v = random(&mut rng, 6, 5);
        let e = random(&mut rng, 3, 5);
        let mut cfg = ScanConfig::new(Direction::ImageText, Pooling::Avg, 4.0, 6.0);
        cfg.max_regions = Some(2);
        let t = score_pair(&v, &e, &cfg).unwrap();
        assert_eq!(t.sim.rows(), 2);
        cfg.max_regions = None;
        let direct = score_pair(&v.head_rows(2), &e, &cfg).unwrap();
        assert_eq!(t.score, direct.score);
    }

    #[test]
    fn config_validation() {
        let mut cfg = ScanConfig::new(Direction::ImageText, Pooling::Lse, 4.0, 0.0);
        assert!(cfg.validate().is_err());
        cfg.pooling = Pooling::Avg;
        assert!(cfg.validate().is_ok());
        cfg.lambda1 = -1.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn sum_max_cases() {
        let v = m(&[&[1.0, 2.0]]);
        let e = m(&[&[3.0, -1.0]]);
        assert_eq!(sum_max_score(&v, &e, Direction::TextImage).unwrap(), 1.0);
        let id = Matrix::identity(2);
        for d in [Direction::TextImage, Direction::ImageText] {
            assert_eq!(sum_max_score(&id, &id, d).unwrap(), 2.0);
        }
    }

    #[test]
    fn ensemble_cases() {
        assert_eq!(ensemble_score(&[0.7]).unwrap(), 0.7);
        assert!((ensemble_score(&[0.2, 0.4]).unwrap() - 0.3).abs() < 1e-16);
        assert!(ensemble_score(&[]).is_err());
    }

    #[test]
    fn trace_weights_are_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let v = random(&mut rng, 4, 6);
        let e = random(&mut rng, 5, 6);
        let it = score_pair(&v, &e, &ScanConfig::new(Direction::ImageText, Pooling::Lse, 4.0, 5.0)).unwrap();
        for i in 0..4 {
            assert!((it.weights.row(i).iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
        let ti = score_pair(&v, &e, &ScanConfig::new(Direction::TextImage, Pooling::Lse, 9.0, 6.0)).unwrap();
        for j in 0..5 {
            assert!((ti.weights.col(j).iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
        for t in [&it, &ti] {
            assert!(t.relevance.iter().all(|r| (-1.0..=1.0).contains(r)));
            assert!(t.sim.data().iter().all(|s| (-1.0 - 1e-12..=1.0 + 1e-12).contains(s)));
        }
    }
}
