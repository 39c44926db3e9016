use rand_chacha::ChaCha8Rng;

use super::{Component, ModelConfig, ModelError};
use crate::gridworld::{Action, Grid};
use crate::numcore::{Graph, ParamId, ParamStore, Scalar, Var};
use crate::tokenizer::Encoding;

const LN_EPS: f64 = 1e-5;

struct LayerIds {
    ln1: (ParamId, ParamId),
    wq: (ParamId, ParamId),
    wk: (ParamId, ParamId),
    wv: (ParamId, ParamId),
    wo: (ParamId, ParamId),
    ln2: (ParamId, ParamId),
    w1: (ParamId, ParamId),
    w2: (ParamId, ParamId),
}

struct EncoderIds {
    tok: ParamId,
    pos: ParamId,
    layers: Vec<LayerIds>,
    final_ln: (ParamId, ParamId),
}

struct WorldIds {
    occupancy: ParamId,
    axes: [ParamId; 3],
    proj: (ParamId, ParamId),
}

struct BuilderIds {
    bilinear: ParamId,
    color: ParamId,
    stop: ParamId,
}

/// Forward functions over a borrowed parameter store.
pub struct Net<'m, T: Scalar> {
    config: ModelConfig,
    params: &'m ParamStore<T>,
    encoder: EncoderIds,
    mlm_bias: Option<ParamId>,
    world: Option<WorldIds>,
    builder: Option<BuilderIds>,
}

impl<'m, T: Scalar> Net<'m, T> {
    pub fn new(config: &ModelConfig, params: &'m ParamStore<T>) -> Result<Self, ModelError> {
        let find = |name: &str, c: Component| params.id(name).ok_or(ModelError::MissingComponent(c));
        let enc = |name: &str| find(&format!("encoder.{name}"), Component::Encoder);
        let pair = |a: &str, b: &str| -> Result<(ParamId, ParamId), ModelError> { Ok((enc(a)?, enc(b)?)) };
        let layers = (0..config.n_layers)
            .map(|l| {
                let p = |s: &str| format!("layer{l}.{s}");
                Ok(LayerIds {
                    ln1: pair(&p("ln1.gain"), &p("ln1.bias"))?,
                    wq: pair(&p("attn.wq"), &p("attn.bq"))?,
                    wk: pair(&p("attn.wk"), &p("attn.bk"))?,
                    wv: pair(&p("attn.wv"), &p("attn.bv"))?,
                    wo: pair(&p("attn.wo"), &p("attn.bo"))?,
                    ln2: pair(&p("ln2.gain"), &p("ln2.bias"))?,
                    w1: pair(&p("ffn.w1"), &p("ffn.b1"))?,
                    w2: pair(&p("ffn.w2"), &p("ffn.b2"))?,
                })
            })
            .collect::<Result<Vec<_>, ModelError>>()?;
        let encoder = EncoderIds {
            tok: enc("tok_emb")?,
            pos: enc("pos_emb")?,
            layers,
            final_ln: pair("final_ln.gain", "final_ln.bias")?,
        };
        let w = |s: &str| find(&format!("world.{s}"), Component::WorldEncoder);
        let world = (|| {
            Ok::<_, ModelError>(WorldIds {
                occupancy: w("occupancy_emb")?,
                axes: [w("x_emb")?, w("y_emb")?, w("z_emb")?],
                proj: (w("proj.w")?, w("proj.b")?),
            })
        })()
        .ok();
        let b = |s: &str| find(&format!("builder.{s}"), Component::BuilderHead);
        let builder = (|| {
            Ok::<_, ModelError>(BuilderIds {
                bilinear: b("bilinear")?,
                color: b("color_emb")?,
                stop: b("stop")?,
            })
        })()
        .ok();
        Ok(Net {
            config: config.clone(),
            params,
            encoder,
            mlm_bias: params.id("mlm_head.bias"),
            world,
            builder,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn p(&self, g: &mut Graph<'m, T>, id: ParamId) -> Var {
        g.param(self.params, id)
    }

    fn linear(&self, g: &mut Graph<'m, T>, x: Var, (w, b): (ParamId, ParamId)) -> Result<Var, ModelError> {
        let w = self.p(g, w);
        let b = self.p(g, b);
        let y = g.matmul(x, w)?;
        Ok(g.add_row(y, b)?)
    }

    fn norm(&self, g: &mut Graph<'m, T>, x: Var, (gain, bias): (ParamId, ParamId)) -> Result<Var, ModelError> {
        let gain = self.p(g, gain);
        let bias = self.p(g, bias);
        Ok(g.layer_norm(x, gain, bias, LN_EPS)?)
    }

    fn drop(&self, g: &mut Graph<'m, T>, x: Var, rng: &mut Option<&mut ChaCha8Rng>) -> Result<Var, ModelError> {
        match rng {
            Some(r) if self.config.dropout > 0.0 => Ok(g.dropout(x, self.config.dropout, *r)?),
            _ => Ok(x),
        }
    }

    /// Hidden states `[max_seq_len, d_model]`. PAD keys are excluded from
    /// attention; passing an RNG enables dropout.
    pub fn encode_text(
        &self,
        g: &mut Graph<'m, T>,
        encoding: &Encoding,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var, ModelError> {
        if encoding.len() != self.config.max_seq_len {
            return Err(crate::numcore::TensorError::ShapeMismatch(format!(
                "encoding of length {} for max_seq_len {}",
                encoding.len(),
                self.config.max_seq_len
            ))
            .into());
        }
        let mask: Vec<bool> = encoding.attention_mask.iter().map(|&m| m == 1).collect();
        self.encode_ids(g, &encoding.ids, &mask, rng)
    }

    /// Hidden states for the non-PAD prefix only, `[real_len, d_model]`.
    /// Rows are identical to the matching rows of [`Net::encode_text`]; the
    /// training loops use this to skip padding work.
    pub fn encode_prefix(
        &self,
        g: &mut Graph<'m, T>,
        encoding: &Encoding,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var, ModelError> {
        let n = encoding.real_len();
        if encoding.attention_mask[..n].contains(&0) {
            return Err(crate::numcore::TensorError::ShapeMismatch("padding inside the real prefix".into()).into());
        }
        self.encode_ids(g, &encoding.ids[..n], &vec![true; n], rng)
    }

    fn encode_ids(
        &self,
        g: &mut Graph<'m, T>,
        ids: &[u32],
        key_mask: &[bool],
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var, ModelError> {
        let cfg = &self.config;
        let n = ids.len();
        if n > cfg.max_seq_len {
            return Err(crate::numcore::TensorError::ShapeMismatch(format!("{n} tokens exceed max_seq_len")).into());
        }
        let tok = self.p(g, self.encoder.tok);
        let pos = self.p(g, self.encoder.pos);
        let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let te = g.gather_rows(tok, &idx)?;
        let positions: Vec<usize> = (0..n).collect();
        let pe = g.gather_rows(pos, &positions)?;
        let mut x = g.add(te, pe)?;
        x = self.drop(g, x, &mut rng)?;

        let dh = cfg.head_dim();
        let inv_sqrt = T::lit(1.0 / (dh as f64).sqrt());
        for layer in &self.encoder.layers {
            let h = self.norm(g, x, layer.ln1)?;
            let q = self.linear(g, h, layer.wq)?;
            let k = self.linear(g, h, layer.wk)?;
            let v = self.linear(g, h, layer.wv)?;
            let mut heads = Vec::with_capacity(cfg.n_heads);
            for head in 0..cfg.n_heads {
                let qh = g.slice_cols(q, head * dh, dh)?;
                let kh = g.slice_cols(k, head * dh, dh)?;
                let vh = g.slice_cols(v, head * dh, dh)?;
                let kt = g.transpose(kh)?;
                let s = g.matmul(qh, kt)?;
                let s = g.scale(s, inv_sqrt);
                let a = g.masked_softmax(s, key_mask)?;
                heads.push(g.matmul(a, vh)?);
            }
            let cat = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
            let o = self.linear(g, cat, layer.wo)?;
            let o = self.drop(g, o, &mut rng)?;
            x = g.add(x, o)?;

            let h = self.norm(g, x, layer.ln2)?;
            let f = self.linear(g, h, layer.w1)?;
            let f = g.gelu(f);
            let f = self.linear(g, f, layer.w2)?;
            let f = self.drop(g, f, &mut rng)?;
            x = g.add(x, f)?;
        }
        self.norm(g, x, self.encoder.final_ln)
    }

    /// Vocabulary logits through the transposed token embedding plus a bias.
    pub fn mlm_logits(&self, g: &mut Graph<'m, T>, hidden: Var) -> Result<Var, ModelError> {
        let bias = self.mlm_bias.ok_or(ModelError::MissingComponent(Component::MlmHead))?;
        let tok = self.p(g, self.encoder.tok);
        let tok_t = g.transpose(tok)?;
        let logits = g.matmul(hidden, tok_t)?;
        let b = self.p(g, bias);
        Ok(g.add_row(logits, b)?)
    }

    /// Cell states `[W·H·D, d_model]` in linear cell order.
    pub fn encode_world(&self, g: &mut Graph<'m, T>, grid: &Grid) -> Result<Var, ModelError> {
        let ids = self
            .world
            .as_ref()
            .ok_or(ModelError::MissingComponent(Component::WorldEncoder))?;
        if grid.dims() != self.config.grid {
            return Err(ModelError::DimsMismatch {
                expected: self.config.grid,
                got: grid.dims(),
            });
        }
        let dims = grid.dims();
        let occ = self.p(g, ids.occupancy);
        let mut x = g.gather_rows(occ, &grid.occupancy_classes())?;
        let coords: Vec<[usize; 3]> = dims
            .cells()
            .map(|c| [c.x as usize, c.y as usize, c.z as usize])
            .collect();
        for (axis, &id) in ids.axes.iter().enumerate() {
            let table = self.p(g, id);
            let idx: Vec<usize> = coords.iter().map(|c| c[axis]).collect();
            let e = g.gather_rows(table, &idx)?;
            x = g.add(x, e)?;
        }
        let h = self.linear(g, x, ids.proj)?;
        Ok(g.tanh(h))
    }

    /// Scores `[1, candidates.len()]`, one per candidate in the given order.
    /// The summary is the CLS row of `text_hidden`; each candidate is scored
    /// as `summary · W · repr`, where `repr` is the cell state plus a color
    /// embedding for Place, the cell state for Remove and a learned vector
    /// for Stop.
    pub fn builder_step_logits(
        &self,
        g: &mut Graph<'m, T>,
        text_hidden: Var,
        world_states: Var,
        candidates: &[Action],
    ) -> Result<Var, ModelError> {
        let ids = self
            .builder
            .as_ref()
            .ok_or(ModelError::MissingComponent(Component::BuilderHead))?;
        if candidates.is_empty() {
            return Err(ModelError::EmptyFeasibleSet);
        }
        let dims = self.config.grid;
        let (mut n_stop, mut place_cells, mut place_colors, mut remove_cells) = (0, vec![], vec![], vec![]);
        for a in candidates {
            match *a {
                Action::Stop => n_stop += 1,
                Action::Place { cell, .. } | Action::Remove { cell } if !dims.contains(cell) => {
                    return Err(ModelError::CandidateOutOfBounds { action: *a, dims });
                }
                Action::Place { cell, color } => {
                    place_cells.push(dims.index_of(cell));
                    place_colors.push(color.index());
                }
                Action::Remove { cell } => remove_cells.push(dims.index_of(cell)),
            }
        }
        let mut parts = Vec::new();
        if n_stop > 0 {
            let stop = self.p(g, ids.stop);
            parts.push(if n_stop == 1 { stop } else { g.gather_rows(stop, &vec![0; n_stop])? });
        }
        if !place_cells.is_empty() {
            let cells = g.gather_rows(world_states, &place_cells)?;
            let table = self.p(g, ids.color);
            let colors = g.gather_rows(table, &place_colors)?;
            parts.push(g.add(cells, colors)?);
        }
        if !remove_cells.is_empty() {
            parts.push(g.gather_rows(world_states, &remove_cells)?);
        }
        let mut reprs = if parts.len() == 1 { parts[0] } else { g.concat_rows(&parts)? };

        // Rows are grouped Stop/Place/Remove; restore the caller's order if it differs.
        let (mut s, mut pl, mut r) = (0, n_stop, n_stop + place_cells.len());
        let order: Vec<usize> = candidates
            .iter()
            .map(|a| {
                let slot = match a {
                    Action::Stop => &mut s,
                    Action::Place { .. } => &mut pl,
                    Action::Remove { .. } => &mut r,
                };
                *slot += 1;
                *slot - 1
            })
            .collect();
        if order.iter().enumerate().any(|(i, &o)| i != o) {
            reprs = g.gather_rows(reprs, &order)?;
        }

        let summary = g.gather_rows(text_hidden, &[0])?;
        let w = self.p(g, ids.bilinear);
        let u = g.matmul(summary, w)?;
        let rt = g.transpose(reprs)?;
        Ok(g.matmul(u, rt)?)
    }
}
