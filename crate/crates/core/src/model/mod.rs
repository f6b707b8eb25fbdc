//! The hierarchical backbone: convolutional stem, four stages of DM blocks
//! with strided downsampling between them, and a pooled linear head.

mod config;

pub use config::{
    BranchToggles, ModelConfig, Preset, NUM_STAGES, OFFSET_KERNELS, RESOLUTION_DIVISOR,
};

use crate::autodiff::{Bound, ParamId, ParamStore, Tape, Var};
use crate::deform::{DeformOutput, DeformVars, OffsetNetVars, OffsetNetWeights};
use crate::error::{Error, Result};
use crate::init::{fan_in_uniform, rng, SeedRng};
use crate::ops::{ChannelAttentionVars, CA_REDUCTION, LN_EPS};
use crate::scan_order::{fixed_order, FixedScanKind, ScanOrder};
use crate::ssm::{default_dt_rank, ScanOptions, SsmParams, SsmVars};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct SsmIds {
    pub a_log: ParamId,
    pub d_skip: ParamId,
    pub w_b: ParamId,
    pub w_c: ParamId,
    pub w_dt: ParamId,
    pub w_dt_out: ParamId,
    pub b_dt: ParamId,
}

impl SsmIds {
    fn register(store: &mut ParamStore, prefix: &str, p: SsmParams) -> Result<Self> {
        let mut add =
            |name: &str, t: Tensor, decay: bool| store.add(format!("{prefix}.{name}"), t, decay);
        Ok(SsmIds {
            a_log: add("a_log", p.a_log, false)?,
            d_skip: add("d_skip", p.d_skip, false)?,
            w_b: add("w_b", p.w_b, true)?,
            w_c: add("w_c", p.w_c, true)?,
            w_dt: add("w_dt", p.w_dt, true)?,
            w_dt_out: add("w_dt_out", p.w_dt_out, true)?,
            b_dt: add("b_dt", p.b_dt, false)?,
        })
    }

    pub fn ids(&self) -> Vec<ParamId> {
        vec![
            self.a_log,
            self.d_skip,
            self.w_b,
            self.w_c,
            self.w_dt,
            self.w_dt_out,
            self.b_dt,
        ]
    }

    pub fn vars(&self, b: &Bound) -> SsmVars {
        SsmVars {
            a_log: b[self.a_log],
            d_skip: Some(b[self.d_skip]),
            w_b: b[self.w_b],
            w_c: b[self.w_c],
            w_dt: b[self.w_dt],
            w_dt_out: b[self.w_dt_out],
            b_dt: b[self.b_dt],
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct OffsetNetIds {
    pub dw_w: ParamId,
    pub dw_b: ParamId,
    /// `[w1, b1, w2, b2]`
    pub ca: Option<[ParamId; 4]>,
    pub ln_g: ParamId,
    pub ln_b: ParamId,
    pub proj: ParamId,
}

impl OffsetNetIds {
    fn register(store: &mut ParamStore, prefix: &str, w: OffsetNetWeights) -> Result<Self> {
        let mut add =
            |name: &str, t: Tensor, decay: bool| store.add(format!("{prefix}.{name}"), t, decay);
        let dw_w = add("dw.weight", w.dw_w, true)?;
        let dw_b = add("dw.bias", w.dw_b, false)?;
        let ca = match w.ca {
            Some(ca) => Some([
                add("ca.fc1.weight", ca.w1, true)?,
                add("ca.fc1.bias", ca.b1, false)?,
                add("ca.fc2.weight", ca.w2, true)?,
                add("ca.fc2.bias", ca.b2, false)?,
            ]),
            None => None,
        };
        Ok(OffsetNetIds {
            dw_w,
            dw_b,
            ca,
            ln_g: add("norm.weight", w.ln_g, false)?,
            ln_b: add("norm.bias", w.ln_b, false)?,
            proj: add("proj.weight", w.proj, true)?,
        })
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.dw_w, self.dw_b];
        ids.extend(self.ca.iter().flatten());
        ids.extend([self.ln_g, self.ln_b, self.proj]);
        ids
    }

    pub fn vars(&self, b: &Bound) -> OffsetNetVars {
        OffsetNetVars {
            dw_w: b[self.dw_w],
            dw_b: b[self.dw_b],
            ca: self.ca.map(|[w1, b1, w2, b2]| ChannelAttentionVars {
                w1: b[w1],
                b1: b[b1],
                w2: b[w2],
                b2: b[b2],
            }),
            ln_g: b[self.ln_g],
            ln_b: b[self.ln_b],
            proj: b[self.proj],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BranchKind {
    Fixed(FixedScanKind),
    Deformable,
}

impl BranchKind {
    pub fn name(&self) -> String {
        match self {
            BranchKind::Fixed(k) => k.to_string(),
            BranchKind::Deformable => "deformable".into(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct BranchIds {
    pub kind: BranchKind,
    pub ssm: SsmIds,
}

#[derive(Clone, Debug)]
pub struct DeformIds {
    pub offset: Option<OffsetNetIds>,
    /// `[H, W]` offset bias table.
    pub bias: Option<ParamId>,
}

#[derive(Clone, Debug)]
pub struct DssmIds {
    pub in_proj: ParamId,
    pub dw_w: ParamId,
    pub dw_b: ParamId,
    pub branches: Vec<BranchIds>,
    pub deform: Option<DeformIds>,
    pub gate: Option<ParamId>,
    pub out_proj: ParamId,
}

impl DssmIds {
    pub fn ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.in_proj, self.dw_w, self.dw_b];
        for b in &self.branches {
            ids.extend(b.ssm.ids());
        }
        if let Some(d) = &self.deform {
            ids.extend(d.offset.iter().flat_map(OffsetNetIds::ids));
            ids.extend(d.bias);
        }
        ids.extend(self.gate);
        ids.push(self.out_proj);
        ids
    }
}

#[derive(Clone, Debug)]
pub struct BlockIds {
    pub norm1: (ParamId, ParamId),
    pub dssm: DssmIds,
    pub norm2: (ParamId, ParamId),
    pub fc1: (ParamId, ParamId),
    pub fc2: (ParamId, ParamId),
}

impl BlockIds {
    pub fn ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.norm1.0, self.norm1.1];
        ids.extend(self.dssm.ids());
        ids.extend([
            self.norm2.0,
            self.norm2.1,
            self.fc1.0,
            self.fc1.1,
            self.fc2.0,
            self.fc2.1,
        ]);
        ids
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ConvNormIds {
    pub conv_w: ParamId,
    pub conv_b: ParamId,
    pub norm: (ParamId, ParamId),
}

#[derive(Clone, Debug)]
pub struct StageIds {
    pub blocks: Vec<BlockIds>,
    pub downsample: Option<ConvNormIds>,
}

/// Where a deformable branch ran and what it produced.
#[derive(Clone, Debug)]
pub struct DeformRecord {
    pub stage: usize,
    pub block: usize,
    pub height: usize,
    pub width: usize,
    pub order: ScanOrder,
    /// `[H, W, 2]` normalized point offsets.
    pub delta_p: Option<Var>,
    /// `[N]` index offsets.
    pub delta_t: Option<Var>,
}

/// Result of one recorded forward pass.
pub struct ForwardTrace {
    /// `[1, num_classes]`
    pub logits: Var,
    /// Feature shape after the stem and after every stage's blocks.
    pub stage_shapes: Vec<Vec<usize>>,
    pub deform: Vec<DeformRecord>,
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    store: ParamStore,
    stem: [ConvNormIds; 2],
    stages: Vec<StageIds>,
    head: (ParamId, ParamId),
}

fn add_conv(
    store: &mut ParamStore,
    rng: &mut SeedRng,
    prefix: &str,
    cin: usize,
    cout: usize,
) -> Result<ConvNormIds> {
    Ok(ConvNormIds {
        conv_w: store.add(
            format!("{prefix}.conv.weight"),
            fan_in_uniform(rng, &[3, 3, cin, cout], 9 * cin),
            true,
        )?,
        conv_b: store.add(format!("{prefix}.conv.bias"), Tensor::zeros(&[cout]), false)?,
        norm: add_norm(store, &format!("{prefix}.norm"), cout)?,
    })
}

fn add_norm(store: &mut ParamStore, prefix: &str, c: usize) -> Result<(ParamId, ParamId)> {
    Ok((
        store.add(format!("{prefix}.weight"), Tensor::full(&[c], 1.0), false)?,
        store.add(format!("{prefix}.bias"), Tensor::zeros(&[c]), false)?,
    ))
}

fn add_linear(
    store: &mut ParamStore,
    rng: &mut SeedRng,
    name: &str,
    fan_in: usize,
    fan_out: usize,
) -> Result<ParamId> {
    store.add(name, fan_in_uniform(rng, &[fan_in, fan_out], fan_in), true)
}

/// Local windows shrink to the largest size that tiles the grid.
pub(crate) fn effective_kind(kind: FixedScanKind, h: usize, w: usize) -> FixedScanKind {
    fn gcd(a: usize, b: usize) -> usize {
        if b == 0 {
            a
        } else {
            gcd(b, a % b)
        }
    }
    match kind {
        FixedScanKind::LocalWindow(win) => FixedScanKind::LocalWindow(gcd(win, gcd(h, w))),
        k => k,
    }
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng(seed);
        let mut store = ParamStore::new();
        let c1 = config.widths[0];
        let stem = [
            add_conv(&mut store, &mut rng, "stem.0", 3, c1 / 2)?,
            add_conv(&mut store, &mut rng, "stem.1", c1 / 2, c1)?,
        ];
        let mut stages = Vec::with_capacity(NUM_STAGES);
        for s in 0..NUM_STAGES {
            let c = config.widths[s];
            let side = ModelConfig::stage_side(config.image_size, s);
            let mut blocks = Vec::with_capacity(config.depths[s]);
            for b in 0..config.depths[s] {
                let prefix = format!("stages.{s}.blocks.{b}");
                blocks.push(Self::add_block(
                    &mut store, &mut rng, &config, &prefix, c, s, side,
                )?);
            }
            let downsample = if s + 1 < NUM_STAGES {
                Some(add_conv(
                    &mut store,
                    &mut rng,
                    &format!("stages.{s}.downsample"),
                    c,
                    config.widths[s + 1],
                )?)
            } else {
                None
            };
            stages.push(StageIds { blocks, downsample });
        }
        let c4 = config.widths[NUM_STAGES - 1];
        let head = (
            add_linear(&mut store, &mut rng, "head.weight", c4, config.num_classes)?,
            store.add("head.bias", Tensor::zeros(&[config.num_classes]), false)?,
        );
        Ok(Model {
            config,
            store,
            stem,
            stages,
            head,
        })
    }

    fn add_block(
        store: &mut ParamStore,
        rng: &mut SeedRng,
        config: &ModelConfig,
        prefix: &str,
        c: usize,
        stage: usize,
        side: usize,
    ) -> Result<BlockIds> {
        let d = config.ssm_ratio * c;
        let n = config.state_size;
        let rank = default_dt_rank(d);
        let norm1 = add_norm(store, &format!("{prefix}.norm1"), c)?;
        let p = format!("{prefix}.dssm");
        let in_proj = add_linear(store, rng, &format!("{p}.in_proj.weight"), c, d)?;
        let dw_w = store.add(
            format!("{p}.dwconv.weight"),
            fan_in_uniform(rng, &[3, 3, d], 9),
            true,
        )?;
        let dw_b = store.add(format!("{p}.dwconv.bias"), Tensor::zeros(&[d]), false)?;

        let br = config.branches;
        let mut kinds = Vec::new();
        if br.fb_bb {
            kinds.push(BranchKind::Fixed(FixedScanKind::Raster));
            kinds.push(BranchKind::Fixed(FixedScanKind::RasterReversed));
        }
        if br.cb {
            kinds.push(BranchKind::Fixed(FixedScanKind::Continuous));
        }
        if br.lb {
            kinds.push(BranchKind::Fixed(FixedScanKind::LocalWindow(
                config.local_window,
            )));
        }
        if br.db {
            kinds.push(BranchKind::Deformable);
        }
        let mut branches = Vec::with_capacity(kinds.len());
        for kind in kinds {
            let name = match kind {
                BranchKind::Fixed(FixedScanKind::LocalWindow(_)) => "local_window".to_string(),
                k => k.name(),
            };
            let ssm = SsmIds::register(
                store,
                &format!("{p}.{name}.ssm"),
                SsmParams::init(rng, d, n, rank)?,
            )?;
            branches.push(BranchIds { kind, ssm });
        }

        let deform = if br.db {
            let t = config.deform;
            let offset = if t.needs_offsets() {
                let w = OffsetNetWeights::init(
                    rng,
                    d,
                    config.offset_kernels[stage],
                    t.ca,
                    CA_REDUCTION,
                )?;
                Some(OffsetNetIds::register(store, &format!("{p}.offset"), w)?)
            } else {
                None
            };
            let bias = if t.uses_bias() {
                Some(store.add(
                    format!("{p}.offset_bias"),
                    Tensor::zeros(&[side, side]),
                    false,
                )?)
            } else {
                None
            };
            Some(DeformIds { offset, bias })
        } else {
            None
        };
        let gate = if br.gate {
            Some(add_linear(store, rng, &format!("{p}.gate.weight"), c, d)?)
        } else {
            None
        };
        let out_proj = add_linear(store, rng, &format!("{p}.out_proj.weight"), d, c)?;
        let dssm = DssmIds {
            in_proj,
            dw_w,
            dw_b,
            branches,
            deform,
            gate,
            out_proj,
        };
        let norm2 = add_norm(store, &format!("{prefix}.norm2"), c)?;
        let hid = config.ffn_ratio * c;
        let fc1 = (
            add_linear(store, rng, &format!("{prefix}.ffn.fc1.weight"), c, hid)?,
            store.add(
                format!("{prefix}.ffn.fc1.bias"),
                Tensor::zeros(&[hid]),
                false,
            )?,
        );
        let fc2 = (
            add_linear(store, rng, &format!("{prefix}.ffn.fc2.weight"), hid, c)?,
            store.add(format!("{prefix}.ffn.fc2.bias"), Tensor::zeros(&[c]), false)?,
        );
        Ok(BlockIds {
            norm1,
            dssm,
            norm2,
            fc1,
            fc2,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn stages(&self) -> &[StageIds] {
        &self.stages
    }

    pub fn stem(&self) -> &[ConvNormIds; 2] {
        &self.stem
    }

    pub fn head(&self) -> (ParamId, ParamId) {
        self.head
    }

    pub fn param_count(&self) -> usize {
        self.store.num_scalars()
    }

    fn scan_options(&self) -> ScanOptions {
        ScanOptions {
            discretization: self.config.discretization,
            chunk: self.config.scan_chunk,
        }
    }

    /// `conv(3→C/2, s2) → LN → GELU → conv(→C, s2) → LN`.
    pub fn patch_embed(&self, tape: &mut Tape, b: &Bound, img: Var) -> Result<Var> {
        let [h, w, 3] = *tape.shape(img) else {
            return Err(Error::dim("patch_embed", tape.shape(img), &[0, 0, 3]));
        };
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::config(format!(
                "patch embedding needs sides divisible by 4, got {h}x{w}"
            )));
        }
        let [s0, s1] = &self.stem;
        let x = tape.conv2d(img, b[s0.conv_w], Some(b[s0.conv_b]), 2, 1)?;
        let x = tape.layer_norm(x, b[s0.norm.0], b[s0.norm.1], LN_EPS)?;
        let x = tape.gelu(x)?;
        let x = tape.conv2d(x, b[s1.conv_w], Some(b[s1.conv_b]), 2, 1)?;
        tape.layer_norm(x, b[s1.norm.0], b[s1.norm.1], LN_EPS)
    }

    /// Strided 3×3 convolution doubling channels, then LN.
    pub fn downsample(tape: &mut Tape, b: &Bound, ids: &ConvNormIds, x: Var) -> Result<Var> {
        let shape = tape.shape(x);
        if shape.len() != 3 || !shape[0].is_multiple_of(2) || !shape[1].is_multiple_of(2) {
            return Err(Error::config(format!(
                "downsampling needs even sides, got {shape:?}"
            )));
        }
        let x = tape.conv2d(x, b[ids.conv_w], Some(b[ids.conv_b]), 2, 1)?;
        tape.layer_norm(x, b[ids.norm.0], b[ids.norm.1], LN_EPS)
    }

    /// Output of one branch, restored to row-major token order, `[N, D]`.
    fn branch_forward(
        &self,
        tape: &mut Tape,
        b: &Bound,
        ids: &DssmIds,
        branch: &BranchIds,
        features: Var,
        flat: Var,
    ) -> Result<(Var, Option<DeformOutput>)> {
        let [h, w, _] = *tape.shape(features) else {
            unreachable!()
        };
        let (seq, order, out) = match branch.kind {
            BranchKind::Fixed(kind) => {
                let order = fixed_order(effective_kind(kind, h, w), h, w)?;
                let seq = if order.is_identity() {
                    flat
                } else {
                    tape.gather_rows(flat, order.order_arc())?
                };
                (seq, order, None)
            }
            BranchKind::Deformable => {
                let d = ids
                    .deform
                    .as_ref()
                    .ok_or_else(|| Error::config("deformable branch without deformable weights"))?;
                let vars = DeformVars {
                    offset: d.offset.map(|o| o.vars(b)),
                    bias: d.bias.map(|r| b[r]),
                    lookup: self.config.bias_lookup,
                };
                let out = tape.deformable_scan(features, self.config.deform, &vars)?;
                (out.seq, out.order.clone(), Some(out))
            }
        };
        let y = tape.ssm(seq, &branch.ssm.vars(b), self.scan_options())?;
        let y = if order.is_identity() {
            y
        } else {
            tape.gather_rows(y, order.inverse_arc())?
        };
        Ok((y, out))
    }

    /// DSSM over `x: [H, W, C]`. Deformable branch outputs are appended to `records`.
    pub fn dssm(
        &self,
        tape: &mut Tape,
        b: &Bound,
        ids: &DssmIds,
        x: Var,
        records: &mut Vec<DeformOutput>,
    ) -> Result<Var> {
        let [h, w, _] = *tape.shape(x) else {
            return Err(Error::dim("dssm", tape.shape(x), &[0, 0, 0]));
        };
        if ids.branches.is_empty() {
            return Err(Error::config("at least one DSSM branch must be enabled"));
        }
        let proj = tape.linear(x, b[ids.in_proj], None)?;
        let conv = tape.depthwise_conv2d(proj, b[ids.dw_w], Some(b[ids.dw_b]), 1, 1)?;
        let features = tape.silu(conv)?;
        let d = tape.shape(features)[2];
        let flat = tape.reshape(features, &[h * w, d])?;
        let mut outs = Vec::with_capacity(ids.branches.len());
        for branch in &ids.branches {
            let (y, rec) = self.branch_forward(tape, b, ids, branch, features, flat)?;
            outs.push(y);
            records.extend(rec);
        }
        let merged = tape.sum_n(&outs)?;
        let merged = tape.reshape(merged, &[h, w, d])?;
        let merged = match ids.gate {
            Some(g) => {
                let z = tape.linear(x, b[g], None)?;
                let z = tape.silu(z)?;
                tape.mul(merged, z)?
            }
            None => merged,
        };
        tape.linear(merged, b[ids.out_proj], None)
    }

    /// `x + DSSM(LN(x))`, then `x + FFN(LN(x))`.
    pub fn dm_block(
        &self,
        tape: &mut Tape,
        b: &Bound,
        ids: &BlockIds,
        x: Var,
        records: &mut Vec<DeformOutput>,
    ) -> Result<Var> {
        let h = tape.layer_norm(x, b[ids.norm1.0], b[ids.norm1.1], LN_EPS)?;
        let h = self.dssm(tape, b, &ids.dssm, h, records)?;
        let x = tape.add(x, h)?;
        let h = tape.layer_norm(x, b[ids.norm2.0], b[ids.norm2.1], LN_EPS)?;
        let h = tape.linear(h, b[ids.fc1.0], Some(b[ids.fc1.1]))?;
        let h = tape.gelu(h)?;
        let h = tape.linear(h, b[ids.fc2.0], Some(b[ids.fc2.1]))?;
        tape.add(x, h)
    }

    /// Full backbone over one `[H, W, 3]` image.
    pub fn forward(&self, tape: &mut Tape, b: &Bound, img: Var) -> Result<ForwardTrace> {
        let shape = tape.shape(img).to_vec();
        if shape.len() != 3 || shape[2] != 3 {
            return Err(Error::input(format!(
                "expected an [H, W, 3] image, got {shape:?}"
            )));
        }
        if !shape[0].is_multiple_of(RESOLUTION_DIVISOR)
            || !shape[1].is_multiple_of(RESOLUTION_DIVISOR)
            || shape[0] == 0
            || shape[1] == 0
        {
            return Err(Error::config(format!(
                "input sides must be positive multiples of {RESOLUTION_DIVISOR}, got {}x{}",
                shape[0], shape[1]
            )));
        }
        let mut x = self.patch_embed(tape, b, img)?;
        let mut stage_shapes = vec![tape.shape(x).to_vec()];
        let mut deform = Vec::new();
        for (s, stage) in self.stages.iter().enumerate() {
            for (k, block) in stage.blocks.iter().enumerate() {
                let mut outs = Vec::new();
                x = self.dm_block(tape, b, block, x, &mut outs)?;
                let (hh, ww) = (tape.shape(x)[0], tape.shape(x)[1]);
                deform.extend(outs.into_iter().map(|o| DeformRecord {
                    stage: s,
                    block: k,
                    height: hh,
                    width: ww,
                    order: o.order,
                    delta_p: o.delta_p,
                    delta_t: o.delta_t,
                }));
            }
            stage_shapes.push(tape.shape(x).to_vec());
            if let Some(ds) = &stage.downsample {
                x = Self::downsample(tape, b, ds, x)?;
            }
        }
        let pooled = tape.global_avg_pool(x)?;
        let c = tape.shape(pooled)[0];
        let pooled = tape.reshape(pooled, &[1, c])?;
        let logits = tape.linear(pooled, b[self.head.0], Some(b[self.head.1]))?;
        Ok(ForwardTrace {
            logits,
            stage_shapes,
            deform,
        })
    }

    /// Inference: `[num_classes]` logits for one image.
    pub fn logits(&self, img: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let b = self.store.bind_frozen(&mut tape);
        let x = tape.constant(img.clone());
        let trace = self.forward(&mut tape, &b, x)?;
        tape.value(trace.logits).reshape(&[self.config.num_classes])
    }
}

/// Exact learnable-scalar count of a model built from `config`.
pub fn count_params(config: &ModelConfig) -> Result<usize> {
    Ok(Model::new(config.clone(), 0)?.param_count())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nano_shapes() {
        let m = Model::new(ModelConfig::nano(), 0).unwrap();
        let mut tape = Tape::new();
        let b = m.store().bind_frozen(&mut tape);
        let img = tape.constant(Tensor::from_fn(&[32, 32, 3], |i| {
            ((i % 7) as f64 - 3.0) / 3.0
        }));
        let t = m.forward(&mut tape, &b, img).unwrap();
        let sides: Vec<usize> = t.stage_shapes[1..].iter().map(|s| s[0]).collect();
        assert_eq!(sides, [8, 4, 2, 1]);
        assert_eq!(tape.shape(t.logits), &[1, 8]);
        assert_eq!(t.deform.len(), 5);
    }

    #[test]
    fn rejects_bad_resolution() {
        let m = Model::new(ModelConfig::nano(), 0).unwrap();
        assert!(matches!(
            m.logits(&Tensor::zeros(&[40, 40, 3])),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            m.logits(&Tensor::zeros(&[32, 32, 1])),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn local_window_tiles_small_grids() {
        assert_eq!(
            effective_kind(FixedScanKind::LocalWindow(2), 1, 1),
            FixedScanKind::LocalWindow(1)
        );
        assert_eq!(
            effective_kind(FixedScanKind::LocalWindow(2), 4, 4),
            FixedScanKind::LocalWindow(2)
        );
    }

    #[test]
    fn decay_only_on_weights() {
        let m = Model::new(ModelConfig::nano(), 0).unwrap();
        for p in m.store().iter() {
            let weight =
                p.name.ends_with("weight") && !p.name.contains("norm") || p.name.contains(".w_");
            assert_eq!(p.decay, weight, "{}", p.name);
        }
    }
}
