//! Convolutional backbone (bottom-up pathway) and feature pyramid
//! (top-down pathway with lateral connections).
//!
//! Levels are numbered 2..=5 from finest to coarsest. The last four backbone
//! blocks feed levels 2, 3, 4 and 5; every block except the last ends in a
//! 2x2 max-pool, and level 5 is the un-pooled output of the last block, so
//! levels 4 and 5 share a spatial extent.
//!
//! The top-down pathway starts at the coarsest emitted level `t`:
//!
//! ```text
//! z[t] = lateral_t(c[t])                                  (1x1 conv)
//! z[l] = smooth_l(up(z[l+1]) + lateral_l(c[l]))           (3x3 conv over a 1x1 conv)
//! ```
//!
//! where `up` is nearest-neighbour upsampling by the extent ratio of the
//! two levels (2, or 1 when they match).

use crate::autodiff::{Graph, NodeId, UpsampleMode};
use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParamNodes, ParamStore};
use crate::tensor::{Real, Tensor};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Pyramid level index, 2 (finest) through 5 (coarsest).
pub type Level = u8;

pub const MIN_LEVEL: Level = 2;
pub const MAX_LEVEL: Level = 5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockSpec {
    /// Number of 3x3 conv + ReLU layers.
    pub convs: usize,
    /// Output channels of every conv in the block.
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    /// Side length of the square single-channel input.
    pub input_size: usize,
    /// Stride of the very first convolution.
    pub stem_stride: usize,
    pub blocks: Vec<BlockSpec>,
    /// Channel count `d` of every top-down map.
    pub feature_dim: usize,
    /// Emitted pyramid levels.
    pub levels: Vec<Level>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl BackboneConfig {
    /// Small CPU-trainable configuration: 64x64 input, four two-conv blocks.
    pub fn desk() -> Self {
        Self {
            input_size: 64,
            stem_stride: 2,
            blocks: [16, 32, 64, 64]
                .into_iter()
                .map(|width| BlockSpec { convs: 2, width })
                .collect(),
            feature_dim: 32,
            levels: vec![2, 3, 4, 5],
        }
    }

    /// VGG-16 layout at 224x224.
    pub fn vgg16() -> Self {
        Self {
            input_size: 224,
            stem_stride: 1,
            blocks: [(2, 64), (2, 128), (3, 256), (3, 512), (3, 512)]
                .into_iter()
                .map(|(convs, width)| BlockSpec { convs, width })
                .collect(),
            feature_dim: 256,
            levels: vec![2, 3, 4, 5],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let nb = self.blocks.len();
        if self.input_size == 0 {
            return Err(Error::config("backbone.input_size", "must be positive"));
        }
        if self.stem_stride == 0 {
            return Err(Error::config("backbone.stem_stride", "must be positive"));
        }
        if self.feature_dim == 0 {
            return Err(Error::config("backbone.feature_dim", "must be positive"));
        }
        if nb == 0 {
            return Err(Error::config("backbone.blocks", "at least one block is required"));
        }
        if let Some(i) = self.blocks.iter().position(|b| b.convs == 0 || b.width == 0) {
            return Err(Error::config(
                format!("backbone.blocks[{i}]"),
                "convs and width must be positive",
            ));
        }
        if self.levels.is_empty() {
            return Err(Error::config("backbone.levels", "at least one level must be emitted"));
        }
        let mut sorted = self.levels.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.levels.len() {
            return Err(Error::config("backbone.levels", "levels must be unique"));
        }
        if let Some(&l) = sorted.iter().find(|&&l| !(MIN_LEVEL..=MAX_LEVEL).contains(&l)) {
            return Err(Error::config(
                "backbone.levels",
                format!("level {l} outside {MIN_LEVEL}..={MAX_LEVEL}"),
            ));
        }
        if nb < self.levels.len() || self.block_of(sorted[0]).is_none() {
            return Err(Error::config(
                "backbone.blocks",
                format!("{nb} blocks cannot feed level {}", sorted[0]),
            ));
        }
        let divisor = self.stem_stride << (nb - 1);
        if self.input_size % divisor != 0 {
            return Err(Error::config(
                "backbone.input_size",
                format!("{} is not divisible by {divisor}", self.input_size),
            ));
        }
        Ok(())
    }

    /// Backbone block whose output is tapped for `level`.
    pub fn block_of(&self, level: Level) -> Option<usize> {
        let from_top = (MAX_LEVEL - level) as usize;
        self.blocks.len().checked_sub(from_top + 1)
    }

    /// Levels the bottom-up pathway produces, ascending.
    pub fn bottom_up_levels(&self) -> Vec<Level> {
        (MIN_LEVEL..=MAX_LEVEL).filter(|&l| self.block_of(l).is_some()).collect()
    }

    /// Emitted levels, ascending.
    pub fn emitted_levels(&self) -> Vec<Level> {
        let mut l = self.levels.clone();
        l.sort_unstable();
        l
    }

    /// Levels traversed by the top-down pathway, from the coarsest emitted
    /// level down to the finest.
    pub fn pathway_levels(&self) -> Vec<Level> {
        let e = self.emitted_levels();
        (e[0]..=*e.last().unwrap()).rev().collect()
    }

    /// Output side length of each block.
    pub fn block_extents(&self) -> Vec<usize> {
        let mut s = self.input_size / self.stem_stride;
        let n = self.blocks.len();
        (0..n)
            .map(|i| {
                if i + 1 < n {
                    s /= 2;
                }
                s
            })
            .collect()
    }

    /// Side length of the level-`level` maps.
    pub fn extent(&self, level: Level) -> Option<usize> {
        self.block_of(level).map(|b| self.block_extents()[b])
    }

    pub fn channels_of(&self, level: Level) -> Option<usize> {
        self.block_of(level).map(|b| self.blocks[b].width)
    }

    pub(crate) fn conv_name(block: usize, conv: usize, part: &str) -> String {
        format!("backbone.block{block}.conv{conv}.{part}")
    }

    pub(crate) fn lateral_name(level: Level, part: &str) -> String {
        format!("fpn.lateral{level}.{part}")
    }

    pub(crate) fn smooth_name(level: Level, part: &str) -> String {
        format!("fpn.smooth{level}.{part}")
    }

    /// Adds freshly initialized backbone and pyramid parameters to `store`.
    /// Convs feeding a ReLU use He-normal weights; the linear pyramid convs
    /// use `N(0, 1/fan_in)`. Biases start at zero.
    pub fn init_params(&self, rng: &mut impl Rng, store: &mut ParamStore) {
        let mut conv = |store: &mut ParamStore, name: String, bias: String, group, shape: [usize; 4], gain: Real| {
            let fan_in = (shape[1] * shape[2] * shape[3]) as Real;
            let normal = Normal::new(0.0, (gain / fan_in).sqrt()).unwrap();
            let w = Tensor::from_fn(&shape, |_| normal.sample(&mut *rng));
            store.insert(name, group, w);
            store.insert(bias, group, Tensor::zeros(&[shape[0]]));
        };
        let mut cin = 1;
        for (b, block) in self.blocks.iter().enumerate() {
            for c in 0..block.convs {
                conv(
                    store,
                    Self::conv_name(b, c, "weight"),
                    Self::conv_name(b, c, "bias"),
                    ParamGroup::Backbone,
                    [block.width, cin, 3, 3],
                    2.0,
                );
                cin = block.width;
            }
        }
        let d = self.feature_dim;
        let path = self.pathway_levels();
        for (i, &l) in path.iter().enumerate() {
            let cl = self.channels_of(l).expect("validated level");
            conv(
                store,
                Self::lateral_name(l, "weight"),
                Self::lateral_name(l, "bias"),
                ParamGroup::Fpn,
                [d, cl, 1, 1],
                1.0,
            );
            if i > 0 {
                conv(
                    store,
                    Self::smooth_name(l, "weight"),
                    Self::smooth_name(l, "bias"),
                    ParamGroup::Fpn,
                    [d, d, 3, 3],
                    1.0,
                );
            }
        }
    }
}

/// Bottom-up maps `c[l]` and top-down maps `z[l]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    pub bottom_up: BTreeMap<Level, Tensor>,
    pub top_down: BTreeMap<Level, Tensor>,
}

fn conv_bias(g: &mut Graph, x: NodeId, w: NodeId, b: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
    let y = g.conv2d(x, w, stride, pad)?;
    g.bias_add(y, b)
}

/// Runs the backbone on `x: [B, 1, H, H]` and returns `c[l]` for every
/// level the backbone can feed.
pub fn bottom_up(
    g: &mut Graph,
    cfg: &BackboneConfig,
    params: &ParamNodes,
    x: NodeId,
) -> Result<BTreeMap<Level, NodeId>> {
    let (_, ch, h, w) = g.value(x).dims4()?;
    if ch != 1 || h != cfg.input_size || w != cfg.input_size {
        return Err(Error::shape(format!(
            "backbone expects [B, 1, {s}, {s}] input, got {:?}",
            g.value(x).shape(),
            s = cfg.input_size
        )));
    }
    let taps: BTreeMap<usize, Level> = cfg
        .bottom_up_levels()
        .into_iter()
        .map(|l| (cfg.block_of(l).unwrap(), l))
        .collect();
    let mut out = BTreeMap::new();
    let mut cur = x;
    let n = cfg.blocks.len();
    for (b, block) in cfg.blocks.iter().enumerate() {
        for c in 0..block.convs {
            let stride = if b == 0 && c == 0 { cfg.stem_stride } else { 1 };
            let w = params.get(&BackboneConfig::conv_name(b, c, "weight"))?;
            let bias = params.get(&BackboneConfig::conv_name(b, c, "bias"))?;
            cur = conv_bias(g, cur, w, bias, stride, 1)?;
            cur = g.relu(cur);
        }
        if b + 1 < n {
            cur = g.maxpool2d(cur, 2, 2)?;
        }
        if let Some(&l) = taps.get(&b) {
            out.insert(l, cur);
        }
    }
    Ok(out)
}

/// Top-down pathway; returns `z[l]` for every emitted level.
pub fn top_down(
    g: &mut Graph,
    cfg: &BackboneConfig,
    params: &ParamNodes,
    c: &BTreeMap<Level, NodeId>,
) -> Result<BTreeMap<Level, NodeId>> {
    let emitted = cfg.emitted_levels();
    let mut out = BTreeMap::new();
    let mut above: Option<NodeId> = None;
    for l in cfg.pathway_levels() {
        let cl = *c
            .get(&l)
            .ok_or_else(|| Error::shape(format!("missing bottom-up map for level {l}")))?;
        let lw = params.get(&BackboneConfig::lateral_name(l, "weight"))?;
        let lb = params.get(&BackboneConfig::lateral_name(l, "bias"))?;
        let lateral = conv_bias(g, cl, lw, lb, 1, 0)?;
        let z = match above {
            None => lateral,
            Some(prev) => {
                let (_, _, hp, _) = g.value(prev).dims4()?;
                let (_, _, hl, _) = g.value(lateral).dims4()?;
                if hp == 0 || hl % hp != 0 {
                    return Err(Error::shape(format!(
                        "level {l} extent {hl} is not a multiple of level {} extent {hp}",
                        l + 1
                    )));
                }
                let up = g.upsample(prev, hl / hp, UpsampleMode::Nearest)?;
                let merged = g.add(up, lateral)?;
                let sw = params.get(&BackboneConfig::smooth_name(l, "weight"))?;
                let sb = params.get(&BackboneConfig::smooth_name(l, "bias"))?;
                conv_bias(g, merged, sw, sb, 1, 1)?
            }
        };
        if emitted.contains(&l) {
            out.insert(l, z);
        }
        above = Some(z);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_extents() {
        let cfg = BackboneConfig::desk();
        cfg.validate().unwrap();
        let ext: Vec<_> = (2..=5).map(|l| cfg.extent(l).unwrap()).collect();
        assert_eq!(ext, vec![16, 8, 4, 4]);
    }

    #[test]
    fn vgg16_extents() {
        let cfg = BackboneConfig::vgg16();
        cfg.validate().unwrap();
        let ext: Vec<_> = (2..=5).map(|l| cfg.extent(l).unwrap()).collect();
        assert_eq!(ext, vec![56, 28, 14, 14]);
    }

    #[test]
    fn validate_names_the_bad_field() {
        let mut cfg = BackboneConfig::desk();
        cfg.input_size = 60;
        match cfg.validate() {
            Err(Error::Config { field, .. }) => assert_eq!(field, "backbone.input_size"),
            other => panic!("{other:?}"),
        }
        let mut cfg = BackboneConfig::desk();
        cfg.levels = vec![1, 2];
        assert!(cfg.validate().is_err());
        let mut cfg = BackboneConfig::desk();
        cfg.blocks.truncate(2);
        assert!(cfg.validate().is_err());
        let mut cfg = BackboneConfig::desk();
        cfg.feature_dim = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn pathway_spans_emitted_range() {
        let mut cfg = BackboneConfig::desk();
        cfg.levels = vec![5, 2, 3];
        assert_eq!(cfg.pathway_levels(), vec![5, 4, 3, 2]);
        cfg.levels = vec![3];
        assert_eq!(cfg.pathway_levels(), vec![3]);
    }
}
