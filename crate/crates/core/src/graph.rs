//! The scoring pipeline and encoders expressed on a [`Tape`], and the
//! batch gradient used by training.
//!
//! Gradients are computed in two levels. An encoder tape maps the
//! parameters to every region and word embedding in the batch. The loss
//! only depends on a handful of pair scores (positives and mined
//! negatives), so each contributing pair gets its own small tape with
//! the two embeddings as inputs. The pair adjoints, scaled by the loss
//! derivative, are then pushed back through the encoder tape in one
//! sweep. Pair tapes are independent and may run on a thread pool; their
//! results are always combined in index order.

use rayon::prelude::*;

use crate::attention::{Direction, Pooling, ScanConfig, Scorer, SumMaxConfig, SumMaxSimilarity};
use crate::encoders::{ModelParams, SentenceEncoder};
use crate::error::{Result, ScanError};
use crate::learning::{loss_with_grad, score_matrix, LossConfig};
use crate::linalg::{Matrix, NORM_EPS};
use crate::tape::{Tape, Var};

/// Parameter leaves registered on a tape, in canonical order.
pub struct ParamVars {
    vars: Vec<Var>,
}

impl ParamVars {
    pub fn register(tape: &mut Tape, params: &ModelParams) -> Self {
        ParamVars {
            vars: params.tensors().into_iter().map(|t| tape.param(t.clone())).collect(),
        }
    }

    fn w_v(&self) -> Var {
        self.vars[0]
    }

    fn b_v(&self) -> Var {
        self.vars[1]
    }

    fn w_e(&self) -> Var {
        self.vars[2]
    }

    /// The nine GRU tensors of one direction.
    fn gru(&self, backward: bool) -> &[Var] {
        let start = if backward { 12 } else { 3 };
        &self.vars[start..start + 9]
    }
}

pub fn project_regions_var(tape: &mut Tape, pv: &ParamVars, raw: &Matrix) -> Result<Var> {
    let f = tape.constant(raw.clone());
    let lin = tape.matmul_bt(f, pv.w_v())?;
    tape.add_row(lin, pv.b_v())
}

fn gru_scan_var(tape: &mut Tape, x: Var, gru: &[Var], reverse: bool) -> Result<Var> {
    let [w_z, w_r, w_h, u_z, u_r, u_h, b_z, b_r, b_h] = gru else {
        unreachable!("nine GRU tensors")
    };
    let n = tape.value(x).rows();
    let hidden = tape.value(*u_z).rows();
    let xz = tape.matmul_bt(x, *w_z)?;
    let xz = tape.add_row(xz, *b_z)?;
    let xr = tape.matmul_bt(x, *w_r)?;
    let xr = tape.add_row(xr, *b_r)?;
    let xh = tape.matmul_bt(x, *w_h)?;
    let xh = tape.add_row(xh, *b_h)?;

    let mut h = tape.constant(Matrix::zeros(1, hidden));
    let mut states = vec![h; n];
    let order: Vec<usize> = if reverse { (0..n).rev().collect() } else { (0..n).collect() };
    for t in order {
        let xz_t = tape.slice_rows(xz, t, 1)?;
        let xr_t = tape.slice_rows(xr, t, 1)?;
        let xh_t = tape.slice_rows(xh, t, 1)?;
        let hz = tape.matmul_bt(h, *u_z)?;
        let z = tape.add(xz_t, hz)?;
        let z = tape.sigmoid(z);
        let hr = tape.matmul_bt(h, *u_r)?;
        let r = tape.add(xr_t, hr)?;
        let r = tape.sigmoid(r);
        let rh = tape.mul(r, h)?;
        let hh = tape.matmul_bt(rh, *u_h)?;
        let cand = tape.add(xh_t, hh)?;
        let cand = tape.tanh(cand);
        // h + z ⊙ (h̃ − h)
        let delta = tape.sub(cand, h)?;
        let step = tape.mul(z, delta)?;
        h = tape.add(h, step)?;
        states[t] = h;
    }
    tape.stack_rows(&states)
}

pub fn encode_sentence_var(
    tape: &mut Tape,
    pv: &ParamVars,
    tokens: &[usize],
    encoder: SentenceEncoder,
) -> Result<Var> {
    if tokens.is_empty() {
        return Err(ScanError::Domain("a sentence needs at least one word".into()));
    }
    let x = tape.gather(pv.w_e(), tokens)?;
    let fwd = gru_scan_var(tape, x, pv.gru(false), false)?;
    match encoder {
        SentenceEncoder::Forward => Ok(fwd),
        SentenceEncoder::Bidirectional => {
            let bwd = gru_scan_var(tape, x, pv.gru(true), true)?;
            let sum = tape.add(fwd, bwd)?;
            Ok(tape.scale(sum, 0.5))
        }
    }
}

fn truncate(tape: &mut Tape, v: Var, max_regions: Option<usize>) -> Result<Var> {
    match max_regions {
        Some(m) if m < tape.value(v).rows() => tape.slice_rows(v, 0, m),
        _ => Ok(v),
    }
}

/// Differentiable stacked cross attention score.
pub fn scan_score_var(tape: &mut Tape, v: Var, e: Var, cfg: &ScanConfig) -> Result<Var> {
    cfg.validate()?;
    let v = truncate(tape, v, cfg.max_regions)?;
    let (anchor, context) = match cfg.direction {
        Direction::ImageText => (v, e),
        Direction::TextImage => (e, v),
    };
    let a_n = tape.normalize_rows(anchor, NORM_EPS);
    let c_n = tape.normalize_rows(context, NORM_EPS);
    // anchors × context; for text-image this is the transposed region-word matrix
    let sim = tape.matmul_bt(a_n, c_n)?;
    let clamped = tape.relu(sim);
    let s_norm = tape.normalize_cols(clamped, NORM_EPS);
    let w = tape.softmax_rows(s_norm, cfg.lambda1);
    let attended = tape.matmul(w, context)?;
    let att_n = tape.normalize_rows(attended, NORM_EPS);
    let rel = tape.row_dot(a_n, att_n)?;
    Ok(match cfg.pooling {
        Pooling::Lse => tape.log_sum_exp(rel, cfg.lambda2),
        Pooling::Avg => tape.mean(rel),
        Pooling::Sum => tape.sum(rel),
        Pooling::Max => tape.max(rel),
    })
}

pub fn sum_max_var(tape: &mut Tape, v: Var, e: Var, cfg: &SumMaxConfig) -> Result<Var> {
    let v = truncate(tape, v, cfg.max_regions)?;
    let (v, e) = match cfg.similarity {
        SumMaxSimilarity::Dot => (v, e),
        SumMaxSimilarity::Cosine => (tape.normalize_rows(v, NORM_EPS), tape.normalize_rows(e, NORM_EPS)),
    };
    let s = match cfg.direction {
        Direction::ImageText => tape.matmul_bt(v, e)?,
        Direction::TextImage => tape.matmul_bt(e, v)?,
    };
    let best = tape.max_rows(s);
    Ok(tape.sum(best))
}

pub fn scorer_var(tape: &mut Tape, v: Var, e: Var, scorer: &Scorer) -> Result<Var> {
    match scorer {
        Scorer::Scan(cfg) => scan_score_var(tape, v, e, cfg),
        Scorer::SumMax(cfg) => sum_max_var(tape, v, e, cfg),
    }
}

/// Score of one pair with its gradients w.r.t. `V` and `E`.
pub fn pair_score_grad(v: &Matrix, e: &Matrix, scorer: &Scorer) -> Result<(f64, Matrix, Matrix)> {
    let mut tape = Tape::new();
    let vv = tape.input(v.clone());
    let ev = tape.input(e.clone());
    let s = scorer_var(&mut tape, vv, ev, scorer)?;
    let g = tape.backward(s)?;
    Ok((tape.scalar(s), g.get(vv), g.get(ev)))
}

/// One mini-batch of aligned (image, sentence) pairs.
pub struct BatchRef<'a> {
    pub images: Vec<&'a Matrix>,
    pub sentences: Vec<&'a [usize]>,
}

/// Everything a gradient step needs.
pub struct BatchGradient {
    pub loss: f64,
    pub scores: Matrix,
    /// Parameter gradients in canonical order.
    pub grads: Vec<Matrix>,
}

/// Loss and exact gradient of the batch triplet objective.
///
/// With `parallel` set, the per-pair work runs on the current rayon
/// pool; the result is bit-identical either way.
pub fn batch_loss_and_grad(
    params: &ModelParams,
    encoder: SentenceEncoder,
    scorer: &Scorer,
    loss_cfg: &LossConfig,
    batch: &BatchRef<'_>,
    parallel: bool,
) -> Result<BatchGradient> {
    let b = batch.images.len();
    if b != batch.sentences.len() {
        return Err(ScanError::dim(format!(
            "{b} images but {} sentences in batch",
            batch.sentences.len()
        )));
    }
    let mut tape = Tape::new();
    let pv = ParamVars::register(&mut tape, params);
    let mut v_vars = Vec::with_capacity(b);
    for img in &batch.images {
        v_vars.push(project_regions_var(&mut tape, &pv, img)?);
    }
    let mut e_vars = Vec::with_capacity(b);
    for toks in &batch.sentences {
        e_vars.push(encode_sentence_var(&mut tape, &pv, toks, encoder)?);
    }
    let vs: Vec<Matrix> = v_vars.iter().map(|&v| tape.value(v).clone()).collect();
    let es: Vec<Matrix> = e_vars.iter().map(|&e| tape.value(e).clone()).collect();

    let scores = score_matrix(&vs, &es, scorer, parallel)?;
    let (loss, d_scores) = loss_with_grad(&scores, loss_cfg)?;

    let active: Vec<(usize, usize, f64)> = (0..b)
        .flat_map(|a| (0..b).map(move |s| (a, s)))
        .filter_map(|(a, s)| {
            let g = d_scores.get(a, s);
            (g != 0.0).then_some((a, s, g))
        })
        .collect();
    let pair = |&(a, s, g): &(usize, usize, f64)| -> Result<(Matrix, Matrix)> {
        let (_, dv, de) = pair_score_grad(&vs[a], &es[s], scorer)?;
        Ok((dv.scale(g), de.scale(g)))
    };
    let pair_grads: Vec<(Matrix, Matrix)> = if parallel {
        active.par_iter().map(pair).collect::<Result<_>>()?
    } else {
        active.iter().map(pair).collect::<Result<_>>()?
    };

    let mut dv: Vec<Option<Matrix>> = vec![None; b];
    let mut de: Vec<Option<Matrix>> = vec![None; b];
    for (&(a, s, _), (gv, ge)) in active.iter().zip(pair_grads) {
        add_into(&mut dv[a], gv)?;
        add_into(&mut de[s], ge)?;
    }
    let mut seeds = Vec::new();
    for (var, g) in v_vars.iter().zip(dv).chain(e_vars.iter().zip(de)) {
        if let Some(g) = g {
            seeds.push((*var, g));
        }
    }
    let grads = if seeds.is_empty() {
        params.tensors().iter().map(|t| Matrix::zeros(t.rows(), t.cols())).collect()
    } else {
        tape.backward_from(&seeds)?.params()
    };
    Ok(BatchGradient {
        loss,
        scores: scores.into_matrix(),
        grads,
    })
}

fn add_into(slot: &mut Option<Matrix>, g: Matrix) -> Result<()> {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::score_pair;
    use crate::encoders::{encode_sentence, project_regions, ImageFeatures, ModelDims, WordSequence};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn tape_scores_agree_with_plain_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for trial in 0..20 {
            let k = 1 + trial % 5;
            let n = 1 + (trial * 3) % 6;
            let v = random(&mut rng, k, 6);
            let e = random(&mut rng, n, 6);
            for direction in [Direction::ImageText, Direction::TextImage] {
                for pooling in [Pooling::Lse, Pooling::Avg, Pooling::Sum, Pooling::Max] {
                    let cfg = ScanConfig::new(direction, pooling, 4.0, 6.0);
                    let plain = score_pair(&v, &e, &cfg).unwrap().score;
                    let (s, _, _) = pair_score_grad(&v, &e, &Scorer::Scan(cfg)).unwrap();
                    assert!((plain - s).abs() <= 1e-12, "{direction:?} {pooling:?}");
                }
                let sm = SumMaxConfig {
                    direction,
                    similarity: SumMaxSimilarity::Dot,
                    max_regions: None,
                };
                let plain = Scorer::SumMax(sm).score(&v, &e).unwrap();
                let (s, _, _) = pair_score_grad(&v, &e, &Scorer::SumMax(sm)).unwrap();
                assert!((plain - s).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn tape_encoders_agree_with_plain_path() {
        let dims = ModelDims {
            raw_dim: 5,
            embed_dim: 4,
            hidden_dim: 3,
            vocab_size: 9,
        };
        let params = ModelParams::init(dims, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let raw = random(&mut rng, 4, 5);
        let toks = vec![3, 8, 0, 3, 1];

        let mut tape = Tape::new();
        let pv = ParamVars::register(&mut tape, &params);
        let v = project_regions_var(&mut tape, &pv, &raw).unwrap();
        let e = encode_sentence_var(&mut tape, &pv, &toks, SentenceEncoder::Bidirectional).unwrap();
        let f = encode_sentence_var(&mut tape, &pv, &toks, SentenceEncoder::Forward).unwrap();

        let v_plain = project_regions(&ImageFeatures::new(raw).unwrap(), &params).unwrap();
        let seq = WordSequence::new(toks).unwrap();
        let e_plain = encode_sentence(&seq, &params).unwrap();
        let f_plain = SentenceEncoder::Forward.encode(&seq, &params).unwrap();
        for (a, b) in [(tape.value(v), &v_plain), (tape.value(e), &e_plain), (tape.value(f), &f_plain)] {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() <= 1e-12);
            }
        }
    }
}
