//! Score grids, Recall@K and score-level ensembling.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::Scorer;
use crate::dataio::Dataset;
use crate::encoders::{project_regions, ImageFeatures, ModelParams, SentenceEncoder, WordSequence};
use crate::error::{Result, ScanError};
use crate::linalg::Matrix;

/// Images × sentences scores plus the ground-truth image of each sentence.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreGrid {
    scores: Matrix,
    truth: Vec<usize>,
}

impl ScoreGrid {
    pub fn new(scores: Matrix, truth: Vec<usize>) -> Result<Self> {
        if truth.len() != scores.cols() {
            return Err(ScanError::dim(format!(
                "{} ground-truth entries for {} sentences",
                truth.len(),
                scores.cols()
            )));
        }
        if let Some(&bad) = truth.iter().find(|&&t| t >= scores.rows()) {
            return Err(ScanError::Domain(format!(
                "ground-truth image {bad} out of range for {} images",
                scores.rows()
            )));
        }
        scores.check_finite("score grid")?;
        Ok(ScoreGrid { scores, truth })
    }

    pub fn scores(&self) -> &Matrix {
        &self.scores
    }

    pub fn truth(&self) -> &[usize] {
        &self.truth
    }

    pub fn images(&self) -> usize {
        self.scores.rows()
    }

    pub fn sentences(&self) -> usize {
        self.scores.cols()
    }

    /// Applies `f` to every score, keeping ground truth.
    pub fn map_scores(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        ScoreGrid::new(self.scores.map(f), self.truth.clone())
    }

    /// Keeps the listed images (in order) and the captions of those images.
    pub fn restrict(&self, images: &[usize]) -> Result<Self> {
        let mut pos = vec![usize::MAX; self.images()];
        for (i, &img) in images.iter().enumerate() {
            pos[img] = i;
        }
        let cols: Vec<usize> = (0..self.sentences())
            .filter(|&j| pos[self.truth[j]] != usize::MAX)
            .collect();
        let mut m = Matrix::zeros(images.len(), cols.len());
        for (r, &img) in images.iter().enumerate() {
            for (c, &j) in cols.iter().enumerate() {
                m.set(r, c, self.scores.get(img, j));
            }
        }
        ScoreGrid::new(m, cols.iter().map(|&j| pos[self.truth[j]]).collect())
    }
}

/// Scores every embedded image against every embedded sentence.
/// Cells are computed independently, so the parallel result equals the
/// sequential one bit for bit.
pub fn score_grid(
    images: &[Matrix],
    sentences: &[Matrix],
    truth: Vec<usize>,
    scorer: &Scorer,
    parallel: bool,
) -> Result<ScoreGrid> {
    let (m, n) = (images.len(), sentences.len());
    let cell = |idx: usize| scorer.score(&images[idx / n], &sentences[idx % n]);
    let vals: Vec<f64> = if parallel {
        (0..m * n).into_par_iter().map(cell).collect::<Result<_>>()?
    } else {
        (0..m * n).map(cell).collect::<Result<_>>()?
    };
    ScoreGrid::new(Matrix::from_vec(m, n, vals)?, truth)
}

/// Encodes a whole dataset with `params` and scores it.
pub fn score_dataset(
    data: &Dataset,
    params: &ModelParams,
    encoder: SentenceEncoder,
    scorer: &Scorer,
    parallel: bool,
) -> Result<ScoreGrid> {
    let vs = data
        .images
        .iter()
        .map(|f| project_regions(&ImageFeatures::new(f.clone())?, params))
        .collect::<Result<Vec<_>>>()?;
    let es = data
        .captions
        .iter()
        .map(|c| encoder.encode(&WordSequence::new(c.tokens.clone())?, params))
        .collect::<Result<Vec<_>>>()?;
    let truth = data.captions.iter().map(|c| c.image).collect();
    score_grid(&vs, &es, truth, scorer, parallel)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RetrievalDirection {
    /// Image queries, sentence candidates.
    SentenceRetrieval,
    /// Sentence queries, image candidates.
    ImageRetrieval,
}

/// Zero-based rank of the best ground-truth candidate for every query.
/// Candidates ahead are those with a higher score, or an equal score and
/// a lower index. Queries without any ground truth are skipped.
pub fn gt_ranks(grid: &ScoreGrid, direction: RetrievalDirection) -> Vec<usize> {
    let s = &grid.scores;
    let ahead = |scores: &[f64], target: usize| {
        let t = scores[target];
        scores
            .iter()
            .enumerate()
            .filter(|&(j, &v)| v > t || (v == t && j < target))
            .count()
    };
    match direction {
        RetrievalDirection::SentenceRetrieval => (0..grid.images())
            .filter_map(|i| {
                let row = s.row(i);
                (0..grid.sentences())
                    .filter(|&j| grid.truth[j] == i)
                    .map(|j| ahead(row, j))
                    .min()
            })
            .collect(),
        RetrievalDirection::ImageRetrieval => (0..grid.sentences())
            .map(|j| ahead(&s.col(j), grid.truth[j]))
            .collect(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Recall {
    pub percent: f64,
    /// K actually used after clamping to the candidate count.
    pub k: usize,
    pub clamped: bool,
}

pub fn recall_at_k(grid: &ScoreGrid, k: usize, direction: RetrievalDirection) -> Result<Recall> {
    if k == 0 {
        return Err(ScanError::Domain("K must be at least 1".into()));
    }
    let candidates = match direction {
        RetrievalDirection::SentenceRetrieval => grid.sentences(),
        RetrievalDirection::ImageRetrieval => grid.images(),
    };
    let used = k.min(candidates.max(1));
    let ranks = gt_ranks(grid, direction);
    let percent = if ranks.is_empty() {
        0.0
    } else {
        100.0 * ranks.iter().filter(|&&r| r < used).count() as f64 / ranks.len() as f64
    };
    Ok(Recall {
        percent,
        k: used,
        clamped: used != k,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallReport {
    pub direction: RetrievalDirection,
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub queries: usize,
    /// Set when 5 or 10 exceeded the candidate count.
    pub k_clamped: bool,
}

impl RecallReport {
    pub fn compute(grid: &ScoreGrid, direction: RetrievalDirection) -> Result<Self> {
        let r = |k| recall_at_k(grid, k, direction);
        let (r1, r5, r10) = (r(1)?, r(5)?, r(10)?);
        Ok(RecallReport {
            direction,
            r1: r1.percent,
            r5: r5.percent,
            r10: r10.percent,
            queries: gt_ranks(grid, direction).len(),
            k_clamped: r1.clamped || r5.clamped || r10.clamped,
        })
    }

    pub fn sum(&self) -> f64 {
        self.r1 + self.r5 + self.r10
    }
}

/// Both directions for one grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub sentence_retrieval: RecallReport,
    pub image_retrieval: RecallReport,
    pub rsum: f64,
}

impl EvalReport {
    pub fn compute(grid: &ScoreGrid) -> Result<Self> {
        let sentence_retrieval = RecallReport::compute(grid, RetrievalDirection::SentenceRetrieval)?;
        let image_retrieval = RecallReport::compute(grid, RetrievalDirection::ImageRetrieval)?;
        let rsum = sentence_retrieval.sum() + image_retrieval.sum();
        Ok(EvalReport {
            sentence_retrieval,
            image_retrieval,
            rsum,
        })
    }
}

/// Averages recalls over consecutive folds of `fold_size` images.
///
/// Fold `f` holds images `f*fold_size .. (f+1)*fold_size` and every caption
/// whose ground-truth image falls inside it. Trailing images that do not
/// fill a whole fold are left out.
pub fn fold_average(grid: &ScoreGrid, fold_size: usize) -> Result<(EvalReport, usize)> {
    if fold_size == 0 || fold_size > grid.images() {
        return Err(ScanError::Config(format!(
            "fold size {fold_size} must be in 1..={}",
            grid.images()
        )));
    }
    let folds = grid.images() / fold_size;
    let mut reports = Vec::with_capacity(folds);
    for f in 0..folds {
        let ids: Vec<usize> = (f * fold_size..(f + 1) * fold_size).collect();
        reports.push(EvalReport::compute(&grid.restrict(&ids)?)?);
    }
    let avg = |pick: fn(&EvalReport) -> &RecallReport| {
        let n = reports.len() as f64;
        let first = pick(&reports[0]);
        RecallReport {
            direction: first.direction,
            r1: reports.iter().map(|r| pick(r).r1).sum::<f64>() / n,
            r5: reports.iter().map(|r| pick(r).r5).sum::<f64>() / n,
            r10: reports.iter().map(|r| pick(r).r10).sum::<f64>() / n,
            queries: reports.iter().map(|r| pick(r).queries).sum(),
            k_clamped: reports.iter().any(|r| pick(r).k_clamped),
        }
    };
    let sentence_retrieval = avg(|r| &r.sentence_retrieval);
    let image_retrieval = avg(|r| &r.image_retrieval);
    let rsum = sentence_retrieval.sum() + image_retrieval.sum();
    Ok((
        EvalReport {
            sentence_retrieval,
            image_retrieval,
            rsum,
        },
        folds,
    ))
}

/// Elementwise mean of grids that share shape and ground truth.
pub fn ensemble_grids(grids: &[ScoreGrid]) -> Result<ScoreGrid> {
    let first = grids
        .first()
        .ok_or_else(|| ScanError::Domain("no grids to ensemble".into()))?;
    let mut acc = first.scores.clone();
    for g in &grids[1..] {
        if g.scores.shape() != first.scores.shape() || g.truth != first.truth {
            return Err(ScanError::dim(format!(
                "cannot ensemble {:?} grid with {:?} grid or differing ground truth",
                first.scores.shape(),
                g.scores.shape()
            )));
        }
        acc.add_assign(&g.scores)?;
    }
    let n = grids.len() as f64;
    ScoreGrid::new(acc.map(|v| v / n), first.truth.clone())
}

/// Paper-style table: one row per model, sentence retrieval then image
/// retrieval, two decimals.
pub fn format_table(rows: &[(String, EvalReport)]) -> String {
    let width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max(6);
    let mut s = format!(
        "{:<width$} | {:^23} | {:^23} | {:>7}\n",
        "Method", "Sentence Retrieval", "Image Retrieval", "rsum"
    );
    s.push_str(&format!(
        "{:<width$} | {:>7}{:>8}{:>8} | {:>7}{:>8}{:>8} | {:>7}\n",
        "", "R@1", "R@5", "R@10", "R@1", "R@5", "R@10", ""
    ));
    for (name, r) in rows {
        let (a, b) = (&r.sentence_retrieval, &r.image_retrieval);
        s.push_str(&format!(
            "{name:<width$} | {:>7.2}{:>8.2}{:>8.2} | {:>7.2}{:>8.2}{:>8.2} | {:>7.2}\n",
            a.r1, a.r5, a.r10, b.r1, b.r5, b.r10, r.rsum
        ));
    }
    if rows.iter().any(|(_, r)| r.sentence_retrieval.k_clamped || r.image_retrieval.k_clamped) {
        s.push_str("note: K was clamped to the number of candidates\n");
    }
    s
}
