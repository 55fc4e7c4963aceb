use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ModelConfig, Role};
use crate::data::EncodedBatch;
use crate::error::{Error, Result};
use crate::nn::{
    build_stack, encoder_layer, encoder_stack, positional_encoding, Bound, EncoderLayerParams,
    Init, LayerNorm, Linear, ParamId, ParamStore,
};
use crate::tensor::{Graph, Real, Tensor, Var};

const TOKEN_INIT_STD: f64 = 0.02;

/// Parameters of one modality's spatial and temporal streams.
#[derive(Clone, Debug)]
pub struct StreamParams {
    /// `1 × D_m`
    pub temporal_cls: ParamId,
    /// `1 × P_m`
    pub spatial_cls: ParamId,
    /// Constant `(D_m + 1) × P_m` sinusoidal table.
    pub spatial_pos: ParamFree,
    pub temporal_in: Linear,
    pub spatial_in: Linear,
    pub spatial_stack: Vec<EncoderLayerParams>,
    pub temporal_stack: Vec<EncoderLayerParams>,
    /// Final pre-norm layer norms, applied to the class tokens.
    pub spatial_norm: LayerNorm,
    pub temporal_norm: LayerNorm,
    pub spatial_head: Linear,
    pub temporal_head: Linear,
}

/// Constant (non-trainable) tensor stored in `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamFree(pub Tensor<f64>);

/// Fusion tokens and encoder layers for one modality pair.
#[derive(Clone, Debug)]
pub struct PairFusion {
    pub first: usize,
    pub second: usize,
    /// `F × d_model`
    pub tokens: ParamId,
    /// Projection applied to the tokens entering the second stream.
    pub bridge: Linear,
    pub first_layers: Vec<EncoderLayerParams>,
    pub second_layers: Vec<EncoderLayerParams>,
}

#[derive(Clone, Debug)]
pub struct Network<T> {
    config: ModelConfig,
    role: Role,
    store: ParamStore<T>,
    streams: Vec<StreamParams>,
    fusion: Vec<PairFusion>,
}

/// Stream inputs of one modality, before and after the input projection.
#[derive(Clone, Copy, Debug)]
pub struct PreparedStreams {
    /// `B × (D_m + 1) × P_m`: class token, transposed features, positions.
    pub spatial_tokens: Var,
    /// `B × (P_m + 1) × D_m`: class token and patches.
    pub temporal_tokens: Var,
    pub spatial: Var,
    pub temporal: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct FusedPair {
    /// `B × (F + len) × d_model`: shared tokens followed by the stream.
    pub first: Var,
    /// As `first`, with the tokens passed through the bridge.
    pub second: Var,
    /// `B × F × d_model` shared tokens after the last fusion layer.
    pub tokens: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct ModalityOutputs {
    pub spatial_cls: Var,
    pub temporal_cls: Var,
    pub spatial_logits: Var,
    pub temporal_logits: Var,
    pub spatial_probs: Var,
    pub temporal_probs: Var,
    /// Sum of the two stream probability vectors; rows sum to 2.
    pub combined: Var,
}

#[derive(Clone, Debug)]
pub struct ForwardOutputs {
    pub modalities: Vec<ModalityOutputs>,
    /// `B × C`, rows sum to 1.
    pub ensemble: Var,
}

/// Values of one modality's outputs for a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalityInference<T> {
    pub spatial_logits: Tensor<T>,
    pub temporal_logits: Tensor<T>,
    pub spatial_probs: Tensor<T>,
    pub temporal_probs: Tensor<T>,
    pub combined: Tensor<T>,
}

/// Gradient-free forward results.
#[derive(Clone, Debug, PartialEq)]
pub struct Inference<T> {
    pub modalities: Vec<ModalityInference<T>>,
    pub ensemble: Tensor<T>,
}

impl<T: Real> Inference<T> {
    pub fn labels(&self) -> Vec<usize> {
        self.ensemble.rows().map(predicted_label).collect()
    }
}

/// Argmax with ties resolved to the lowest class index.
pub fn predicted_label<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

impl<T: Real> Network<T> {
    /// Builds and validates a network for `role`.
    pub fn new(config: ModelConfig, role: Role, seed: u64) -> Result<Self> {
        config.validate(role)?;
        Self::assemble(config, role, seed)
    }

    /// Builds without the role checks. A single-modality "teacher" built
    /// this way simply has no fusion pairs.
    pub fn assemble(config: ModelConfig, role: Role, seed: u64) -> Result<Self> {
        config.validate_shape()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init::new(&mut rng);
        let mut store = ParamStore::new();
        let (d, h, ff) = (config.d_model, config.heads, config.ff_dim);
        let mut streams = Vec::with_capacity(config.modalities.len());
        for m in &config.modalities {
            let (p_m, d_m) = (m.patches, m.features);
            let base = format!("mod.{}", m.name);
            let temporal_cls = store.add(format!("{base}.temporal.cls"), init.normal(&[1, d_m], TOKEN_INIT_STD))?;
            let spatial_cls = store.add(format!("{base}.spatial.cls"), init.normal(&[1, p_m], TOKEN_INIT_STD))?;
            let temporal_in = Linear::new(&mut store, &mut init, &format!("{base}.temporal.input"), d_m, d)?;
            let spatial_in = Linear::new(&mut store, &mut init, &format!("{base}.spatial.input"), p_m, d)?;
            let spatial_stack = build_stack(&mut store, &mut init, &format!("{base}.spatial"), config.mstt_layers, d, h, ff)?;
            let temporal_stack = build_stack(&mut store, &mut init, &format!("{base}.temporal"), config.mstt_layers, d, h, ff)?;
            let spatial_norm = LayerNorm::new(&mut store, &format!("{base}.spatial.norm"), d)?;
            let temporal_norm = LayerNorm::new(&mut store, &format!("{base}.temporal.norm"), d)?;
            let spatial_head = Linear::new(&mut store, &mut init, &format!("{base}.spatial.head"), d, config.classes)?;
            let temporal_head = Linear::new(&mut store, &mut init, &format!("{base}.temporal.head"), d, config.classes)?;
            streams.push(StreamParams {
                temporal_cls,
                spatial_cls,
                spatial_pos: ParamFree(spatial_positions(d_m + 1, p_m)?),
                temporal_in,
                spatial_in,
                spatial_stack,
                temporal_stack,
                spatial_norm,
                temporal_norm,
                spatial_head,
                temporal_head,
            });
        }
        let mut fusion = Vec::new();
        if role == Role::Teacher {
            for (i, j) in config.pairs() {
                let base = format!("fusion.{}+{}", config.modalities[i].name, config.modalities[j].name);
                let tokens = store.add(
                    format!("{base}.tokens"),
                    init.normal(&[config.fusion_tokens, d], TOKEN_INIT_STD),
                )?;
                let bridge = Linear::identity(&mut store, &format!("{base}.bridge"), d)?;
                let first_layers = build_stack(&mut store, &mut init, &format!("{base}.first"), config.tmt_layers, d, h, ff)?;
                let second_layers = build_stack(&mut store, &mut init, &format!("{base}.second"), config.tmt_layers, d, h, ff)?;
                fusion.push(PairFusion {
                    first: i,
                    second: j,
                    tokens,
                    bridge,
                    first_layers,
                    second_layers,
                });
            }
        }
        Ok(Network {
            config,
            role,
            store,
            streams,
            fusion,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn streams(&self) -> &[StreamParams] {
        &self.streams
    }

    pub fn fusion(&self) -> &[PairFusion] {
        &self.fusion
    }

    pub fn param_count(&self) -> usize {
        self.store.count()
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        self.store.bind(g, trainable)
    }

    /// Copies every parameter of `other` (same architecture) into `self`.
    pub fn cast_from<U: Real>(&mut self, other: &Network<U>) -> Result<()> {
        if self.config != other.config || self.role != other.role {
            return Err(Error::Config("cast_from between different architectures".into()));
        }
        for (dst, (_, src)) in self.store.tensors_mut().iter_mut().zip(other.store.iter()) {
            *dst = src.cast();
        }
        Ok(())
    }

    /// Class token + transposed features + positions for the spatial
    /// stream, class token + patches for the temporal stream, each projected
    /// to `d_model`.
    pub fn prepare_streams(&self, g: &mut Graph<T>, p: &Bound, m: usize, x: Var) -> Result<PreparedStreams> {
        let spec = &self.config.modalities[m];
        let s = &self.streams[m];
        let shape = g.shape(x).to_vec();
        if shape.len() != 3 || shape[1] != spec.patches || shape[2] != spec.features {
            return Err(Error::Dimension(format!(
                "modality `{}` expects [B, {}, {}], got {shape:?}",
                spec.name, spec.patches, spec.features
            )));
        }
        let b = shape[0];

        let cls = g.expand(p.var(s.temporal_cls), b)?;
        let temporal_tokens = g.concat(&[cls, x], 1)?;

        let xt = g.transpose_last2(x)?;
        let cls = g.expand(p.var(s.spatial_cls), b)?;
        let stacked = g.concat(&[cls, xt], 1)?;
        let pos = g.constant(s.spatial_pos.0.cast());
        let spatial_tokens = g.add_broadcast(stacked, pos)?;

        let spatial = s.spatial_in.forward(g, p, spatial_tokens)?;
        let temporal = s.temporal_in.forward(g, p, temporal_tokens)?;
        Ok(PreparedStreams {
            spatial_tokens,
            temporal_tokens,
            spatial,
            temporal,
        })
    }

    /// Independent spatial/temporal encoder stacks per modality. Returns
    /// `(spatial, temporal)` sequences in modality order.
    pub fn mstt_forward(&self, g: &mut Graph<T>, p: &Bound, inputs: &[Var]) -> Result<Vec<(Var, Var)>> {
        if inputs.len() != self.streams.len() {
            return Err(Error::Config(format!(
                "expected {} modality inputs, got {}",
                self.streams.len(),
                inputs.len()
            )));
        }
        inputs
            .iter()
            .enumerate()
            .map(|(m, &x)| {
                let prep = self.prepare_streams(g, p, m, x)?;
                let s = &self.streams[m];
                let spatial = encoder_stack(g, p, &s.spatial_stack, prep.spatial)?;
                let temporal = encoder_stack(g, p, &s.temporal_stack, prep.temporal)?;
                Ok((spatial, temporal))
            })
            .collect()
    }

    /// Runs one pair's fusion layers. At every layer the shared tokens are
    /// prepended to both temporal streams (through the bridge for the
    /// second), each stream passes its own encoder layer, and the two
    /// updated token blocks are averaged. The returned streams carry the
    /// final shared tokens in front, so position 0 is a fused token.
    pub fn tmt_fuse_pair(&self, g: &mut Graph<T>, p: &Bound, pair: &PairFusion, first: Var, second: Var) -> Result<FusedPair> {
        let f = self.config.fusion_tokens;
        if f == 0 {
            return Err(Error::Config("fusion needs at least one token".into()));
        }
        let b = g.shape(first)[0];
        let (len1, len2) = (g.shape(first)[1], g.shape(second)[1]);
        let mut tokens = g.expand(p.var(pair.tokens), b)?;
        let (mut h1, mut h2) = (first, second);
        for (l1, l2) in pair.first_layers.iter().zip(&pair.second_layers) {
            let bridged = pair.bridge.forward(g, p, tokens)?;
            let aug1 = g.concat(&[tokens, h1], 1)?;
            let aug2 = g.concat(&[bridged, h2], 1)?;
            let o1 = encoder_layer(g, p, l1, aug1)?;
            let o2 = encoder_layer(g, p, l2, aug2)?;
            let t1 = g.slice_axis(o1, 1, 0, f)?;
            let t2 = g.slice_axis(o2, 1, 0, f)?;
            let sum = g.add(t1, t2)?;
            tokens = g.scale(sum, T::of(0.5))?;
            h1 = g.slice_axis(o1, 1, f, f + len1)?;
            h2 = g.slice_axis(o2, 1, f, f + len2)?;
        }
        let bridged = pair.bridge.forward(g, p, tokens)?;
        Ok(FusedPair {
            first: g.concat(&[tokens, h1], 1)?,
            second: g.concat(&[bridged, h2], 1)?,
            tokens,
        })
    }

    /// Final norm and spatial/temporal heads on the position-0 embeddings:
    /// the class tokens, or the first fused token after mid-fusion.
    pub fn modality_head(&self, g: &mut Graph<T>, p: &Bound, m: usize, spatial: Var, temporal: Var) -> Result<ModalityOutputs> {
        let s = &self.streams[m];
        let d = self.config.d_model;
        let cls_of = |g: &mut Graph<T>, seq: Var| -> Result<Var> {
            let b = g.shape(seq)[0];
            let first = g.slice_axis(seq, 1, 0, 1)?;
            g.reshape(first, &[b, d])
        };
        let spatial_cls = cls_of(g, spatial)?;
        let spatial_cls = s.spatial_norm.forward(g, p, spatial_cls)?;
        let temporal_cls = cls_of(g, temporal)?;
        let temporal_cls = s.temporal_norm.forward(g, p, temporal_cls)?;
        let spatial_logits = s.spatial_head.forward(g, p, spatial_cls)?;
        let temporal_logits = s.temporal_head.forward(g, p, temporal_cls)?;
        let spatial_probs = g.softmax_lastdim(spatial_logits)?;
        let temporal_probs = g.softmax_lastdim(temporal_logits)?;
        let combined = g.add(spatial_probs, temporal_probs)?;
        Ok(ModalityOutputs {
            spatial_cls,
            temporal_cls,
            spatial_logits,
            temporal_logits,
            spatial_probs,
            temporal_probs,
            combined,
        })
    }

    /// Full forward pass from per-modality `B × P_m × D_m` inputs.
    pub fn forward_vars(&self, g: &mut Graph<T>, p: &Bound, inputs: &[Var]) -> Result<ForwardOutputs> {
        let streams = self.mstt_forward(g, p, inputs)?;
        let mut temporal: Vec<Var> = streams.iter().map(|s| s.1).collect();
        if !self.fusion.is_empty() {
            let fused = self
                .fusion
                .iter()
                .map(|pair| {
                    let r = self.tmt_fuse_pair(g, p, pair, temporal[pair.first], temporal[pair.second])?;
                    Ok((r.first, r.second))
                })
                .collect::<Result<Vec<_>>>()?;
            let pairs: Vec<(usize, usize)> = self.fusion.iter().map(|f| (f.first, f.second)).collect();
            temporal = tmt_aggregate(g, streams.len(), &pairs, &fused)?;
        }
        let modalities = streams
            .iter()
            .zip(&temporal)
            .enumerate()
            .map(|(m, (&(spatial, _), &t))| self.modality_head(g, p, m, spatial, t))
            .collect::<Result<Vec<_>>>()?;
        let combined: Vec<Var> = modalities.iter().map(|o| o.combined).collect();
        let ensemble = ensemble_predict(g, &combined)?;
        Ok(ForwardOutputs { modalities, ensemble })
    }

    pub fn forward(&self, g: &mut Graph<T>, p: &Bound, batch: &EncodedBatch<T>) -> Result<ForwardOutputs> {
        let inputs: Vec<Var> = batch.features.iter().map(|x| g.constant(x.clone())).collect();
        self.forward_vars(g, p, &inputs)
    }

    /// Forward pass without gradient tracking.
    pub fn infer(&self, batch: &EncodedBatch<T>) -> Result<Inference<T>> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let out = self.forward(&mut g, &p, batch)?;
        Ok(Inference {
            modalities: out
                .modalities
                .iter()
                .map(|o| ModalityInference {
                    spatial_logits: g.value(o.spatial_logits).clone(),
                    temporal_logits: g.value(o.temporal_logits).clone(),
                    spatial_probs: g.value(o.spatial_probs).clone(),
                    temporal_probs: g.value(o.temporal_probs).clone(),
                    combined: g.value(o.combined).clone(),
                })
                .collect(),
            ensemble: g.value(out.ensemble).clone(),
        })
    }
}

/// Spatial position table with one row per spatial token and `P_m`
/// columns. Odd widths take the first `P_m` columns of the next even table.
fn spatial_positions(tokens: usize, width: usize) -> Result<Tensor<f64>> {
    let even = width + width % 2;
    let table = positional_encoding::<f64>(tokens, even)?;
    Ok(Tensor::from_fn(vec![tokens, width], |i| {
        table.data()[(i / width) * even + i % width]
    }))
}

/// Averages, for each modality, its fused temporal stream over every pair
/// containing it.
pub fn tmt_aggregate<T: Real>(
    g: &mut Graph<T>,
    modalities: usize,
    pairs: &[(usize, usize)],
    fused: &[(Var, Var)],
) -> Result<Vec<Var>> {
    if modalities < 2 {
        return Err(Error::Config(format!(
            "mid-fusion needs at least 2 modalities, got {modalities}"
        )));
    }
    if pairs.len() != modalities * (modalities - 1) / 2 || fused.len() != pairs.len() {
        return Err(Error::Config(format!(
            "expected {} fused pairs for {modalities} modalities, got {}",
            modalities * (modalities - 1) / 2,
            fused.len()
        )));
    }
    (0..modalities)
        .map(|m| {
            let parts: Vec<Var> = pairs
                .iter()
                .zip(fused)
                .filter_map(|(&(a, b), &(fa, fb))| {
                    if a == m {
                        Some(fa)
                    } else if b == m {
                        Some(fb)
                    } else {
                        None
                    }
                })
                .collect();
            if parts.len() == 1 {
                return Ok(parts[0]);
            }
            let mut total = parts[0];
            for &v in &parts[1..] {
                total = g.add(total, v)?;
            }
            g.scale(total, T::one() / T::of(parts.len() as f64))
        })
        .collect()
}

/// Mean of the per-modality combined outputs, normalized to sum to 1.
pub fn ensemble_predict<T: Real>(g: &mut Graph<T>, combined: &[Var]) -> Result<Var> {
    let first = *combined
        .first()
        .ok_or_else(|| Error::Config("ensemble of zero modalities".into()))?;
    let mut total = first;
    for &v in &combined[1..] {
        total = g.add(total, v)?;
    }
    g.scale(total, T::one() / T::of(2.0 * combined.len() as f64))
}
