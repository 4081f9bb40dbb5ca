//! Conditional temporal residual network shared by both denoiser roles.
//!
//! Layout: a stem convolution lifts the input channels (plus fixed sinusoidal
//! position channels) to `width`, a stack of
//! residual blocks (conv, group norm, swish, FiLM, conv, group norm, swish)
//! follows, and a zero-initialized 1x1 head maps back to `out_channels`.
//! The diffusion level and the conditioning vector are embedded by two small
//! perceptrons whose sum drives the FiLM layers.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::layers::{self, Conv1d, GroupNorm, Linear, NormCache};
use super::scalar::Real;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Initial-state dimensions fed to the conditioning encoder (0 when inpainting).
    pub x0_dim: usize,
    /// Task-vector dimensions; each has a learned null embedding.
    pub y_dim: usize,
    pub width: usize,
    pub blocks: usize,
    pub kernel: usize,
    pub groups: usize,
    pub level_dim: usize,
    pub embed_dim: usize,
    /// Fixed sinusoidal position channels appended to the input.
    #[serde(default)]
    pub positions: usize,
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.groups == 0 || self.width % self.groups != 0 {
            return Err(Error::Config(format!(
                "width {} must be a positive multiple of groups {}",
                self.width, self.groups
            )));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::Config(format!("kernel size {} must be odd", self.kernel)));
        }
        if self.in_channels == 0 || self.out_channels == 0 || self.embed_dim == 0 || self.level_dim < 2 {
            return Err(Error::Config("network dimensions must be positive".into()));
        }
        Ok(())
    }

    pub fn cond_dim(&self) -> usize {
        self.x0_dim + self.y_dim
    }
}

/// A named parameter tensor inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Init {
    FanIn(usize),
    Zeros,
    Ones,
}

#[derive(Default)]
struct Builder {
    entries: Vec<ParamEntry>,
    inits: Vec<Init>,
    total: usize,
}

impl Builder {
    fn add(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        let offset = self.total;
        let len: usize = shape.iter().product();
        self.entries.push(ParamEntry { name, shape, offset });
        self.inits.push(init);
        self.total += len;
        offset
    }

    fn linear(&mut self, name: &str, inp: usize, out: usize, zero: bool) -> Linear {
        let w = self.add(format!("{name}.weight"), vec![inp, out], if zero { Init::Zeros } else { Init::FanIn(inp) });
        let b = self.add(format!("{name}.bias"), vec![out], Init::Zeros);
        Linear { w, b, inp, out }
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, kernel: usize, zero: bool) -> Conv1d {
        let fan = cin * kernel;
        let w = self.add(format!("{name}.weight"), vec![kernel, cin, cout], if zero { Init::Zeros } else { Init::FanIn(fan) });
        let b = self.add(format!("{name}.bias"), vec![cout], Init::Zeros);
        Conv1d { w, b, cin, cout, kernel }
    }

    fn norm(&mut self, name: &str, channels: usize, groups: usize) -> GroupNorm {
        let offset = self.add(format!("{name}.scale"), vec![channels], Init::Ones);
        self.add(format!("{name}.shift"), vec![channels], Init::Zeros);
        GroupNorm { offset, channels, groups }
    }
}

#[derive(Debug, Clone)]
struct Block {
    conv1: Conv1d,
    norm1: GroupNorm,
    film: Linear,
    conv2: Conv1d,
    norm2: GroupNorm,
}

/// Architecture description plus parameter layout; weights live outside.
#[derive(Debug, Clone)]
pub struct Network {
    cfg: NetConfig,
    entries: Vec<ParamEntry>,
    inits: Vec<Init>,
    total: usize,
    level1: Linear,
    level2: Linear,
    null: Option<usize>,
    cond1: Option<Linear>,
    cond2: Option<Linear>,
    stem: Conv1d,
    blocks: Vec<Block>,
    head: Conv1d,
}

/// One batch of network inputs.
///
/// `traj` is `[batch, len, in_channels]`, `cond` is `[batch, x0_dim + y_dim]`
/// with the initial state first, and `null_mask` is `[batch, y_dim]`.
#[derive(Debug, Clone, Copy)]
pub struct NetInput<'a, T> {
    pub batch: usize,
    pub len: usize,
    pub traj: &'a [T],
    pub levels: &'a [usize],
    pub cond: &'a [T],
    pub null_mask: &'a [bool],
}

struct BlockCache<T> {
    col1: Vec<T>,
    n1c: NormCache<T>,
    n1: Vec<T>,
    s1: Vec<T>,
    mods: Vec<T>,
    col2: Vec<T>,
    n2c: NormCache<T>,
    n2: Vec<T>,
}

/// Intermediate activations kept by [`Network::forward_cached`].
pub struct Cache<T> {
    batch: usize,
    len: usize,
    lev: Vec<T>,
    l1: Vec<T>,
    l1s: Vec<T>,
    cin: Vec<T>,
    c1: Vec<T>,
    c1s: Vec<T>,
    e_pre: Vec<T>,
    e: Vec<T>,
    stem_col: Vec<T>,
    blocks: Vec<BlockCache<T>>,
    head_in: Vec<T>,
}

impl Network {
    pub fn new(cfg: NetConfig) -> Result<Self> {
        cfg.validate()?;
        let mut b = Builder::default();
        let e = cfg.embed_dim;
        let level1 = b.linear("level.fc1", cfg.level_dim, e, false);
        let level2 = b.linear("level.fc2", e, e, false);
        let null = (cfg.y_dim > 0).then(|| b.add("cond.null".into(), vec![cfg.y_dim], Init::Zeros));
        let (cond1, cond2) = if cfg.cond_dim() > 0 {
            (
                Some(b.linear("cond.fc1", cfg.cond_dim(), e, false)),
                Some(b.linear("cond.fc2", e, e, false)),
            )
        } else {
            (None, None)
        };
        let stem = b.conv("stem", cfg.in_channels + cfg.positions, cfg.width, cfg.kernel, false);
        let blocks = (0..cfg.blocks)
            .map(|i| Block {
                conv1: b.conv(&format!("block{i}.conv1"), cfg.width, cfg.width, cfg.kernel, false),
                norm1: b.norm(&format!("block{i}.norm1"), cfg.width, cfg.groups),
                film: b.linear(&format!("block{i}.film"), e, 2 * cfg.width, false),
                conv2: b.conv(&format!("block{i}.conv2"), cfg.width, cfg.width, cfg.kernel, false),
                norm2: b.norm(&format!("block{i}.norm2"), cfg.width, cfg.groups),
            })
            .collect();
        let head = b.conv("head", cfg.width, cfg.out_channels, 1, true);
        Ok(Self {
            cfg,
            entries: b.entries,
            inits: b.inits,
            total: b.total,
            level1,
            level2,
            null,
            cond1,
            cond2,
            stem,
            blocks,
            head,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn num_params(&self) -> usize {
        self.total
    }

    /// Fan-in scaled normal weights, zero biases, unit norm scales, zero head.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f32> {
        let mut p = vec![0.0f32; self.total];
        for (entry, init) in self.entries.iter().zip(&self.inits) {
            let dst = &mut p[entry.offset..entry.offset + entry.len()];
            match *init {
                Init::Zeros => {}
                Init::Ones => dst.fill(1.0),
                Init::FanIn(fan) => {
                    let std = 1.0 / (fan as f64).sqrt();
                    for v in dst.iter_mut() {
                        *v = (std * rng.sample::<f64, _>(StandardNormal)) as f32;
                    }
                }
            }
        }
        p
    }

    fn check_input<T>(&self, inp: &NetInput<'_, T>) -> Result<()> {
        let c = &self.cfg;
        let b = inp.batch;
        if inp.traj.len() != b * inp.len * c.in_channels {
            return Err(Error::mismatch("trajectory input length", b * inp.len * c.in_channels, inp.traj.len()));
        }
        if inp.levels.len() != b {
            return Err(Error::mismatch("level count", b, inp.levels.len()));
        }
        if inp.cond.len() != b * c.cond_dim() {
            return Err(Error::mismatch("conditioning length", b * c.cond_dim(), inp.cond.len()));
        }
        if inp.null_mask.len() != b * c.y_dim {
            return Err(Error::mismatch("null mask length", b * c.y_dim, inp.null_mask.len()));
        }
        Ok(())
    }

    /// Predicted noise, `[batch, len, out_channels]`.
    pub fn forward<T: Real>(&self, p: &[T], inp: &NetInput<'_, T>) -> Result<Vec<T>> {
        self.forward_cached(p, inp).map(|(y, _)| y)
    }

    pub fn forward_cached<T: Real>(&self, p: &[T], inp: &NetInput<'_, T>) -> Result<(Vec<T>, Cache<T>)> {
        self.check_input(inp)?;
        if p.len() != self.total {
            return Err(Error::mismatch("parameter count", self.total, p.len()));
        }
        let cfg = &self.cfg;
        let (bsz, len, w) = (inp.batch, inp.len, cfg.width);

        let lev = layers::level_embedding::<T>(inp.levels, cfg.level_dim);
        let l1 = self.level1.forward(p, &lev, bsz);
        let l1s = layers::silu(&l1);
        let mut e_pre = self.level2.forward(p, &l1s, bsz);

        let (mut cin, mut c1, mut c1s) = (Vec::new(), Vec::new(), Vec::new());
        if let (Some(cond1), Some(cond2)) = (&self.cond1, &self.cond2) {
            cin = inp.cond.to_vec();
            if let Some(null) = self.null {
                let cd = cfg.cond_dim();
                for b in 0..bsz {
                    for i in 0..cfg.y_dim {
                        if inp.null_mask[b * cfg.y_dim + i] {
                            cin[b * cd + cfg.x0_dim + i] = p[null + i];
                        }
                    }
                }
            }
            c1 = cond1.forward(p, &cin, bsz);
            c1s = layers::silu(&c1);
            let c2 = cond2.forward(p, &c1s, bsz);
            for (a, v) in e_pre.iter_mut().zip(c2) {
                *a += v;
            }
        }
        let e = layers::silu(&e_pre);

        let (mut h, stem_col) = if cfg.positions > 0 {
            self.stem.forward(p, &with_positions(inp.traj, bsz, len, cfg.in_channels, cfg.positions), bsz, len)
        } else {
            self.stem.forward(p, inp.traj, bsz, len)
        };
        let mut caches = Vec::with_capacity(self.blocks.len());
        for blk in &self.blocks {
            let (a1, col1) = blk.conv1.forward(p, &h, bsz, len);
            let (n1, n1c) = blk.norm1.forward(p, &a1, bsz, len);
            let s1 = layers::silu(&n1);
            let mods = blk.film.forward(p, &e, bsz);
            let f = layers::film(&s1, &mods, bsz, len, w);
            let (a2, col2) = blk.conv2.forward(p, &f, bsz, len);
            let (n2, n2c) = blk.norm2.forward(p, &a2, bsz, len);
            let s2 = layers::silu(&n2);
            let out: Vec<T> = h.iter().zip(&s2).map(|(a, b)| *a + *b).collect();
            caches.push(BlockCache {
                col1,
                n1c,
                n1,
                s1,
                mods,
                col2,
                n2c,
                n2,
            });
            h = out;
        }
        let (y, _) = self.head.forward(p, &h, bsz, len);
        Ok((
            y,
            Cache {
                batch: bsz,
                len,
                lev,
                l1,
                l1s,
                cin,
                c1,
                c1s,
                e_pre,
                e,
                stem_col,
                blocks: caches,
                head_in: h,
            },
        ))
    }

    /// Gradient of `sum(dy * y)` with respect to every parameter.
    pub fn backward<T: Real>(&self, p: &[T], cache: &Cache<T>, dy: &[T], null_mask: &[bool]) -> Vec<T> {
        let cfg = &self.cfg;
        let (bsz, len, w) = (cache.batch, cache.len, cfg.width);
        let mut g = vec![T::zero(); self.total];

        let mut dh = self.head.backward(p, &cache.head_in, dy, bsz, len, &mut g, true);
        let mut de = vec![T::zero(); bsz * cfg.embed_dim];
        for (blk, c) in self.blocks.iter().zip(&cache.blocks).rev() {
            let ds2 = dh.clone();
            let dn2 = layers::silu_backward(&c.n2, &ds2);
            let da2 = blk.norm2.backward(p, &c.n2c, &dn2, bsz, len, &mut g);
            let df = blk.conv2.backward(p, &c.col2, &da2, bsz, len, &mut g, true);
            let (ds1, dmods) = layers::film_backward(&c.s1, &c.mods, &df, bsz, len, w);
            let de_blk = blk.film.backward(p, &cache.e, &dmods, bsz, &mut g);
            for (a, v) in de.iter_mut().zip(de_blk) {
                *a += v;
            }
            let dn1 = layers::silu_backward(&c.n1, &ds1);
            let da1 = blk.norm1.backward(p, &c.n1c, &dn1, bsz, len, &mut g);
            let dx = blk.conv1.backward(p, &c.col1, &da1, bsz, len, &mut g, true);
            // residual path
            for (a, v) in dh.iter_mut().zip(dx) {
                *a += v;
            }
        }
        self.stem.backward(p, &cache.stem_col, &dh, bsz, len, &mut g, false);

        let de_pre = layers::silu_backward(&cache.e_pre, &de);
        let dl1s = self.level2.backward(p, &cache.l1s, &de_pre, bsz, &mut g);
        let dl1 = layers::silu_backward(&cache.l1, &dl1s);
        self.level1.backward(p, &cache.lev, &dl1, bsz, &mut g);

        if let (Some(cond1), Some(cond2)) = (&self.cond1, &self.cond2) {
            let dc1s = cond2.backward(p, &cache.c1s, &de_pre, bsz, &mut g);
            let dc1 = layers::silu_backward(&cache.c1, &dc1s);
            let dcin = cond1.backward(p, &cache.cin, &dc1, bsz, &mut g);
            if let Some(null) = self.null {
                let cd = cfg.cond_dim();
                for b in 0..bsz {
                    for i in 0..cfg.y_dim {
                        if null_mask[b * cfg.y_dim + i] {
                            g[null + i] += dcin[b * cd + cfg.x0_dim + i];
                        }
                    }
                }
            }
        }
        g
    }
}

/// Appends `n` channels `sin`/`cos` of `pi * f * (t + 1/2) / len`, f = 1, 2, ...
fn with_positions<T: Real>(traj: &[T], batch: usize, len: usize, channels: usize, n: usize) -> Vec<T> {
    let pos: Vec<T> = (0..len)
        .flat_map(|t| {
            (0..n).map(move |j| {
                let a = std::f64::consts::PI * (j / 2 + 1) as f64 * (t as f64 + 0.5) / len as f64;
                T::of(if j % 2 == 0 { a.cos() } else { a.sin() })
            })
        })
        .collect();
    let mut out = Vec::with_capacity(batch * len * (channels + n));
    for (row, t) in traj.chunks_exact(channels).zip((0..len).cycle()) {
        out.extend_from_slice(row);
        out.extend_from_slice(&pos[t * n..(t + 1) * n]);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn tiny() -> NetConfig {
        NetConfig {
            in_channels: 3,
            out_channels: 3,
            x0_dim: 2,
            y_dim: 2,
            width: 4,
            blocks: 1,
            kernel: 3,
            groups: 2,
            level_dim: 4,
            embed_dim: 4,
            positions: 2,
        }
    }

    #[test]
    fn fresh_network_predicts_zero() {
        let net = Network::new(tiny()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = net.init_params(&mut rng);
        let traj = vec![0.5f32; 2 * 6 * 3];
        let y = net
            .forward(
                &p,
                &NetInput {
                    batch: 2,
                    len: 6,
                    traj: &traj,
                    levels: &[1, 7],
                    cond: &[0.1; 8],
                    null_mask: &[false; 4],
                },
            )
            .unwrap();
        assert!(y.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn layout_is_contiguous() {
        let net = Network::new(tiny()).unwrap();
        let mut off = 0;
        for e in net.entries() {
            assert_eq!(e.offset, off);
            off += e.len();
        }
        assert_eq!(off, net.num_params());
        assert!(net.num_params() <= 1000);
    }

    #[test]
    fn rejects_bad_config() {
        let mut c = tiny();
        c.groups = 3;
        assert!(Network::new(c.clone()).is_err());
        c.groups = 2;
        c.kernel = 4;
        assert!(Network::new(c).is_err());
    }
}
