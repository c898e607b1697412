//! Pre-layer-norm transformer stack shared by the chunk encoder, the
//! sliding-window encoder and the chunk aggregator.

use rand::Rng;

use super::Mode;
use crate::error::Result;
use crate::tensor::{AttentionRows, Bound, ParamId, ParamSet, Tensor, Var};

pub(crate) const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug)]
pub(crate) struct LayerIds {
    ln1_g: ParamId,
    ln1_b: ParamId,
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

const LAYER_PARAMS: [&str; 16] = [
    "ln1.gamma", "ln1.beta", "attn.wq", "attn.bq", "attn.wk", "attn.bk", "attn.wv", "attn.bv", "attn.wo",
    "attn.bo", "ln2.gamma", "ln2.beta", "ff.w1", "ff.b1", "ff.w2", "ff.b2",
];

#[derive(Clone, Debug)]
pub(crate) struct StackIds {
    layers: Vec<LayerIds>,
    final_g: ParamId,
    final_b: ParamId,
}

/// How queries select keys inside one attention call.
pub(crate) enum KeyPattern<'a> {
    /// Full attention over unmasked keys, built from primitive ops.
    Dense { key_mask: &'a [bool] },
    /// Fused kernel scoring only the listed pairs.
    Rows(&'a AttentionRows),
}

impl StackIds {
    pub(crate) fn init<R: Rng>(params: &mut ParamSet, prefix: &str, dim: usize, ff: usize, layers: usize, rng: &mut R) -> Self {
        let mut layer_ids = Vec::with_capacity(layers);
        for l in 0..layers {
            let shapes = [
                (1, dim),
                (1, dim),
                (dim, dim),
                (1, dim),
                (dim, dim),
                (1, dim),
                (dim, dim),
                (1, dim),
                (dim, dim),
                (1, dim),
                (1, dim),
                (1, dim),
                (dim, ff),
                (1, ff),
                (ff, dim),
                (1, dim),
            ];
            let ids: Vec<ParamId> = LAYER_PARAMS
                .iter()
                .zip(shapes)
                .map(|(name, (r, c))| {
                    let t = if name.ends_with("gamma") {
                        Tensor::full(r, c, 1.0)
                    } else if r == 1 {
                        Tensor::zeros(r, c)
                    } else {
                        Tensor::truncated_normal(r, c, INIT_STD, rng)
                    };
                    params.add(format!("{prefix}layer{l}.{name}"), t)
                })
                .collect();
            layer_ids.push(LayerIds::from_slice(&ids));
        }
        Self {
            layers: layer_ids,
            final_g: params.add(format!("{prefix}final_ln.gamma"), Tensor::full(1, dim, 1.0)),
            final_b: params.add(format!("{prefix}final_ln.beta"), Tensor::zeros(1, dim)),
        }
    }

    pub(crate) fn lookup(params: &ParamSet, prefix: &str, layers: usize) -> Result<Self> {
        let mut layer_ids = Vec::with_capacity(layers);
        for l in 0..layers {
            let ids = LAYER_PARAMS
                .iter()
                .map(|name| params.id(&format!("{prefix}layer{l}.{name}")))
                .collect::<Result<Vec<_>>>()?;
            layer_ids.push(LayerIds::from_slice(&ids));
        }
        Ok(Self {
            layers: layer_ids,
            final_g: params.id(&format!("{prefix}final_ln.gamma"))?,
            final_b: params.id(&format!("{prefix}final_ln.beta"))?,
        })
    }

    /// Runs all blocks and the final layer norm over `x` (`L x dim`).
    pub(crate) fn forward<'t>(
        &self,
        bound: &Bound<'t>,
        mut x: Var<'t>,
        heads: usize,
        pattern: &KeyPattern<'_>,
        dropout: f64,
        mode: &mut Mode<'_>,
    ) -> Result<Var<'t>> {
        for layer in &self.layers {
            let h = x.layer_norm(bound[layer.ln1_g], bound[layer.ln1_b])?;
            let q = h.matmul(bound[layer.wq])?.add_row(bound[layer.bq])?;
            let k = h.matmul(bound[layer.wk])?.add_row(bound[layer.bk])?;
            let v = h.matmul(bound[layer.wv])?.add_row(bound[layer.bv])?;
            let attn = match pattern {
                KeyPattern::Dense { key_mask } => dense_attention(q, k, v, heads, key_mask)?,
                KeyPattern::Rows(rows) => q.tape().attention(q, k, v, heads, (*rows).clone())?,
            };
            let attn = attn.matmul(bound[layer.wo])?.add_row(bound[layer.bo])?;
            x = x.add(mode.dropout(attn, dropout)?)?;

            let h = x.layer_norm(bound[layer.ln2_g], bound[layer.ln2_b])?;
            let f = h.matmul(bound[layer.w1])?.add_row(bound[layer.b1])?.gelu()?;
            let f = f.matmul(bound[layer.w2])?.add_row(bound[layer.b2])?;
            x = x.add(mode.dropout(f, dropout)?)?;
        }
        x.layer_norm(bound[self.final_g], bound[self.final_b])
    }
}

impl LayerIds {
    fn from_slice(ids: &[ParamId]) -> Self {
        Self {
            ln1_g: ids[0],
            ln1_b: ids[1],
            wq: ids[2],
            bq: ids[3],
            wk: ids[4],
            bk: ids[5],
            wv: ids[6],
            bv: ids[7],
            wo: ids[8],
            bo: ids[9],
            ln2_g: ids[10],
            ln2_b: ids[11],
            w1: ids[12],
            b1: ids[13],
            w2: ids[14],
            b2: ids[15],
        }
    }
}

/// Scaled dot-product attention over all unmasked keys, head by head,
/// composed from matmul / masked softmax primitives.
pub(crate) fn dense_attention<'t>(q: Var<'t>, k: Var<'t>, v: Var<'t>, heads: usize, key_mask: &[bool]) -> Result<Var<'t>> {
    let [len, dim] = q.shape();
    let hd = dim / heads;
    let mask: Vec<bool> = (0..len).flat_map(|_| key_mask.iter().copied()).collect();
    let scale = 1.0 / (hd as f64).sqrt();
    let outs = (0..heads)
        .map(|h| {
            let (qh, kh, vh) = (q.slice_cols(h * hd, hd)?, k.slice_cols(h * hd, hd)?, v.slice_cols(h * hd, hd)?);
            qh.matmul_nt(kh)?.scale(scale)?.softmax(Some(&mask))?.matmul(vh)
        })
        .collect::<Result<Vec<_>>>()?;
    if outs.len() == 1 {
        return Ok(outs[0]);
    }
    q.tape().concat_cols(&outs)
}

/// Key sets for sliding-window attention with global positions.
///
/// A non-global query `i` sees unmasked keys in `[i - window, i + window]`
/// plus all unmasked global keys; a global query sees every unmasked key.
pub fn sliding_rows(len: usize, window: usize, global: &[usize], key_mask: &[bool]) -> AttentionRows {
    let is_global: Vec<bool> = (0..len).map(|i| global.contains(&i)).collect();
    let keys = (0..len)
        .map(|i| {
            if is_global[i] {
                return (0..len).filter(|&j| key_mask[j]).collect();
            }
            let lo = i.saturating_sub(window);
            let hi = (i + window).min(len - 1);
            (0..len)
                .filter(|&j| key_mask[j] && ((lo..=hi).contains(&j) || is_global[j]))
                .collect()
        })
        .collect();
    AttentionRows::new(keys)
}
