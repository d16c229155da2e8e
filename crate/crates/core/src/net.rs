//! The enhancement-based reconstruction network: patch embedding, a cascade
//! of AMSS block groups, sub-pixel unembedding and a global residual.

use rand::Rng;

use crate::amss::{self, AmssBlockIds, AmssDims, MaskDraw, MaskKey};
use crate::autodiff::{Conv2dSpec, Tape, Var};
use crate::nn;
use crate::params::{fan_in, Bound, ParamId, ParamStore};
use crate::rng;
use crate::tensor::{Result, Scalar, Tensor, TensorError};

#[derive(Clone, Debug, PartialEq)]
pub struct NetConfig {
    /// 2 for complex MRI (real, imag), 1 for CT.
    pub in_channels: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub groups: usize,
    pub blocks_per_group: usize,
    pub expansion: usize,
    pub n_state: usize,
    /// Keep scan masking on outside training.
    pub eval_mask: bool,
    /// Four SSM parameter sets per block instead of one shared set.
    pub per_direction: bool,
    pub exact_zoh: bool,
    pub seed: u64,
}

impl NetConfig {
    /// Small CPU-friendly configuration.
    pub fn desk(in_channels: usize) -> Self {
        NetConfig {
            in_channels,
            patch_size: 4,
            embed_dim: 16,
            groups: 2,
            blocks_per_group: 1,
            expansion: 2,
            n_state: 4,
            eval_mask: false,
            per_direction: false,
            exact_zoh: false,
            seed: 0,
        }
    }

    /// Full-size configuration (6 groups of 2 blocks, width 180).
    pub fn full_scale(in_channels: usize) -> Self {
        NetConfig {
            groups: 6,
            blocks_per_group: 2,
            embed_dim: 180,
            n_state: 16,
            ..Self::desk(in_channels)
        }
    }

    pub fn block_dims(&self) -> AmssDims {
        AmssDims {
            channels: self.embed_dim,
            expansion: self.expansion,
            n_state: self.n_state,
            per_direction: self.per_direction,
        }
    }

    pub fn n_blocks(&self) -> usize {
        self.groups * self.blocks_per_group
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let (c, p, ch) = (self.embed_dim, self.patch_size, self.in_channels);
        let embed = p * p * ch * c + c;
        let group = self.blocks_per_group * self.block_dims().param_count() + 2 * c + 9 * c * c + c;
        let unembed = c * p * p * ch + p * p * ch;
        embed + self.groups * group + unembed
    }

    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let p = self.patch_size;
        if !h.is_multiple_of(p) || !w.is_multiple_of(p) || h == 0 || w == 0 {
            let pad = |n: usize| (p - n % p) % p;
            return Err(TensorError::Invalid {
                op: "patch_embed",
                msg: format!(
                    "{h}x{w} is not divisible by patch size {p}; pad by {}x{} pixels",
                    pad(h),
                    pad(w)
                ),
            });
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct GroupIds {
    pub blocks: Vec<AmssBlockIds>,
    pub norm_g: ParamId,
    pub norm_b: ParamId,
    pub conv_w: ParamId,
    pub conv_b: ParamId,
}

#[derive(Clone, Debug)]
pub struct NetLayout {
    pub embed_w: ParamId,
    pub embed_b: ParamId,
    pub groups: Vec<GroupIds>,
    pub unembed_w: ParamId,
    pub unembed_b: ParamId,
}

/// Network weights plus the layout that addresses them.
#[derive(Clone, Debug)]
pub struct ModelParams<T> {
    pub cfg: NetConfig,
    pub store: ParamStore<T>,
    pub layout: NetLayout,
}

impl<T: Scalar> ModelParams<T> {
    /// Seeded initialisation. The output projection starts at zero, so a
    /// fresh network is the identity map.
    pub fn init(cfg: &NetConfig) -> Self {
        let mut r = rng::keyed(cfg.seed, &[rng::domain::DATA, 0x004E_4554]);
        let mut store = ParamStore::new();
        let layout = build_layout(cfg, &mut store, &mut r);
        ModelParams {
            cfg: cfg.clone(),
            store,
            layout,
        }
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            cfg: self.cfg.clone(),
            store: self.store.cast(),
            layout: self.layout.clone(),
        }
    }

    /// Eval-mode reconstruction of a `[B, h, w, c]` batch with explicit mask
    /// draws (`draws[block][sample]`), outside any training tape.
    pub fn run(&self, x: &Tensor<T>, draws: &[Vec<MaskDraw>]) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let bound = self.store.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let y = mambamir_forward(&mut tape, xv, self, &bound, draws)?;
        Ok(tape.value(y).clone())
    }
}

fn build_layout<T: Scalar, R: Rng>(cfg: &NetConfig, store: &mut ParamStore<T>, r: &mut R) -> NetLayout {
    let (c, p, ch) = (cfg.embed_dim, cfg.patch_size, cfg.in_channels);
    let embed_w = store.add("embed.w", fan_in(r, &[p, p, ch, c], p * p * ch));
    let embed_b = store.add("embed.b", Tensor::zeros(&[c]));
    let groups = (0..cfg.groups)
        .map(|g| {
            let blocks = (0..cfg.blocks_per_group)
                .map(|m| AmssBlockIds::init(store, &format!("group{g}.block{m}"), cfg.block_dims(), r))
                .collect();
            GroupIds {
                blocks,
                norm_g: store.add(format!("group{g}.norm.g"), Tensor::full(&[c], T::one())),
                norm_b: store.add(format!("group{g}.norm.b"), Tensor::zeros(&[c])),
                conv_w: store.add(format!("group{g}.conv.w"), fan_in(r, &[3, 3, c, c], 9 * c)),
                conv_b: store.add(format!("group{g}.conv.b"), Tensor::zeros(&[c])),
            }
        })
        .collect();
    let unembed_w = store.add("unembed.w", Tensor::zeros(&[c, p * p * ch]));
    let unembed_b = store.add("unembed.b", Tensor::zeros(&[p * p * ch]));
    NetLayout {
        embed_w,
        embed_b,
        groups,
        unembed_w,
        unembed_b,
    }
}

/// `[B, h, w, c] -> [B, h/p, w/p, C]` by a stride-`p` `p x p` convolution.
pub fn patch_embed<T: Scalar>(tape: &mut Tape<T>, x: Var, w: Var, b: Var, p: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 4 || !s[1].is_multiple_of(p) || !s[2].is_multiple_of(p) {
        let pad = |n: usize| (p - n % p) % p;
        return Err(TensorError::Invalid {
            op: "patch_embed",
            msg: format!(
                "input {s:?} not divisible by patch size {p}; pad by {}x{} pixels",
                pad(*s.get(1).unwrap_or(&0)),
                pad(*s.get(2).unwrap_or(&0))
            ),
        });
    }
    nn::conv2d(tape, x, w, b, Conv2dSpec::new(p, 0, 1))
}

/// `[B, H, W, C] -> [B, H*p, W*p, c]`: 1x1 projection to `p*p*c` channels
/// then depth-to-space.
pub fn patch_unembed<T: Scalar>(tape: &mut Tape<T>, z: Var, w: Var, b: Var, p: usize) -> Result<Var> {
    let y = nn::linear(tape, z, w, b)?;
    tape.depth_to_space(y, p)
}

/// Mask draws for a batch: `draws[block][sample]`. `sample_ids` are the
/// dataset indices (or pass indices) keyed into the stream.
pub fn draw_masks(cfg: &NetConfig, seed: u64, step: u64, sample_ids: &[u64], active: bool) -> Vec<Vec<MaskDraw>> {
    (0..cfg.n_blocks() as u64)
        .map(|block| {
            sample_ids
                .iter()
                .map(|&sample| {
                    amss::draw_mask(
                        MaskKey {
                            seed,
                            step,
                            sample,
                            block,
                        },
                        active,
                    )
                })
                .collect()
        })
        .collect()
}

/// `x + unembed(groups(embed(x)))`, each group being
/// `g + conv3x3(norm(blocks(g)))`.
pub fn mambamir_forward<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    model: &ModelParams<T>,
    bound: &Bound,
    draws: &[Vec<MaskDraw>],
) -> Result<Var> {
    let cfg = &model.cfg;
    let s = tape.shape(x).to_vec();
    if s.len() != 4 || s[3] != cfg.in_channels {
        return Err(TensorError::Invalid {
            op: "mambamir_forward",
            msg: format!("expected [B, h, w, {}], got {s:?}", cfg.in_channels),
        });
    }
    cfg.check_input(s[1], s[2])?;
    if draws.len() != cfg.n_blocks() {
        return Err(TensorError::Invalid {
            op: "mambamir_forward",
            msg: format!("{} mask draw sets for {} blocks", draws.len(), cfg.n_blocks()),
        });
    }
    let lay = &model.layout;
    let v = |id| bound.var(id);
    let mut z = patch_embed(tape, x, v(lay.embed_w), v(lay.embed_b), cfg.patch_size)?;
    let mut block = 0;
    for g in &lay.groups {
        let mut h = z;
        for ids in &g.blocks {
            h = amss::amss_block_forward(tape, h, ids, bound, &draws[block], cfg.exact_zoh)?;
            block += 1;
        }
        let h = nn::layer_norm(tape, h, v(g.norm_g), v(g.norm_b))?;
        let h = nn::conv2d(tape, h, v(g.conv_w), v(g.conv_b), Conv2dSpec::new(1, 1, 1))?;
        z = tape.add(z, h)?;
    }
    let out = patch_unembed(tape, z, v(lay.unembed_w), v(lay.unembed_b), cfg.patch_size)?;
    tape.add(x, out)
}
