//! High-resolution representation encoder.
//!
//! A stride-4 stem feeds four stages. Stage 1 runs bottleneck residual units on a single
//! 1/4-resolution branch; each later stage holds one more, lower-resolution branch,
//! runs a Basic Block on every branch and then exchanges information across all
//! branches. Transitions after stages 1-3 spawn the next branch with a stride-2
//! convolution from the current lowest-resolution output.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::ConvBn;
use crate::params::ParamStore;

/// Channel expansion of the stage-1 bottleneck units.
pub const BOTTLENECK_EXPANSION: usize = 4;

/// Input sides must be multiples of this so that every level has an integer size.
pub const INPUT_MULTIPLE: usize = 32;

/// Resolution level as a power-of-two downsample exponent: 2 is 1/4 of the input, 5 is 1/32.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Level(u8);

impl Level {
    pub const QUARTER: Level = Level(2);
    pub const EIGHTH: Level = Level(3);
    pub const SIXTEENTH: Level = Level(4);
    pub const THIRTY_SECOND: Level = Level(5);
    pub const ALL: [Level; 4] = [Self::QUARTER, Self::EIGHTH, Self::SIXTEENTH, Self::THIRTY_SECOND];

    /// Downsample factor relative to the network input.
    pub fn factor(self) -> usize {
        1 << self.0
    }

    /// Zero-based branch index (0 for 1/4).
    pub fn index(self) -> usize {
        (self.0 - 2) as usize
    }

    pub fn from_index(i: usize) -> Option<Level> {
        Self::ALL.get(i).copied()
    }

    /// The next lower resolution, if any.
    pub fn lower(self) -> Option<Level> {
        Self::from_index(self.index() + 1)
    }
}

impl std::fmt::Display for Level {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "1/{}", self.factor())
    }
}

/// An activation in a graph tagged with its resolution level.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeatureMap {
    pub var: Var,
    pub level: Level,
}

impl FeatureMap {
    pub fn new(var: Var, level: Level) -> Self {
        Self { var, level }
    }

    /// `(channels, height, width)` of the first batch item.
    pub fn dims(&self, g: &Graph) -> (usize, usize, usize) {
        let (_, c, h, w) = g.value(self.var).dims4();
        (c, h, w)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    /// Width W of the 1/4 branch; lower branches use 2W, 4W, 8W.
    pub base_width: usize,
    pub stem_width: usize,
    pub bottleneck_planes: usize,
    pub bottleneck_units: usize,
    /// Residual units per Basic Block.
    pub basic_units: usize,
    /// Multi-branch modules per stage (stages 2-4).
    pub modules_per_stage: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            base_width: 18,
            stem_width: 64,
            bottleneck_planes: 64,
            bottleneck_units: 4,
            basic_units: 4,
            modules_per_stage: 1,
        }
    }
}

impl BackboneConfig {
    /// Small configuration for CPU experiments (W = 8).
    pub fn desk() -> Self {
        Self {
            base_width: 8,
            stem_width: 16,
            bottleneck_planes: 8,
            ..Self::default()
        }
    }

    /// Smallest sensible configuration for a given base width; used by gradient checks.
    pub fn tiny(base_width: usize) -> Self {
        Self {
            base_width,
            stem_width: 2 * base_width,
            bottleneck_planes: base_width,
            ..Self::default()
        }
    }

    pub fn widths(&self) -> [usize; 4] {
        let w = self.base_width;
        [w, 2 * w, 4 * w, 8 * w]
    }

    pub fn width(&self, level: Level) -> usize {
        self.widths()[level.index()]
    }

    pub fn stage1_channels(&self) -> usize {
        self.bottleneck_planes * BOTTLENECK_EXPANSION
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("backbone.base_width", self.base_width),
            ("backbone.stem_width", self.stem_width),
            ("backbone.bottleneck_planes", self.bottleneck_planes),
            ("backbone.bottleneck_units", self.bottleneck_units),
            ("backbone.basic_units", self.basic_units),
            ("backbone.modules_per_stage", self.modules_per_stage),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::config(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }
}

fn check_channels(g: &Graph, map: &FeatureMap, expected: usize, what: &str) -> Result<()> {
    let (c, _, _) = map.dims(g);
    if c != expected {
        return Err(Error::shape(format!(
            "{what} expects {expected} channels at level {}, got {c}",
            map.level
        )));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct Stem {
    conv1: ConvBn,
    conv2: ConvBn,
    pub out_channels: usize,
}

impl Stem {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, name: &str, width: usize) -> Self {
        Self {
            conv1: ConvBn::new(store, rng, &format!("{name}.conv1"), 3, width, 3, 2, true),
            conv2: ConvBn::new(store, rng, &format!("{name}.conv2"), width, width, 3, 2, true),
            out_channels: width,
        }
    }

    /// Two stride-2 3x3 convolutions: `[n, 3, H, W]` to F0 at 1/4 resolution.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<FeatureMap> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != 3 {
            return Err(Error::shape(format!("stem expects [n, 3, h, w] input, got {shape:?}")));
        }
        let (h, w) = (shape[2], shape[3]);
        if h == 0 || w == 0 || h % INPUT_MULTIPLE != 0 || w % INPUT_MULTIPLE != 0 {
            return Err(Error::shape(format!(
                "input {h}x{w} is not divisible by {INPUT_MULTIPLE}; both sides must be multiples of {INPUT_MULTIPLE}"
            )));
        }
        let y = self.conv1.forward(g, x);
        let y = self.conv2.forward(g, y);
        Ok(FeatureMap::new(y, Level::QUARTER))
    }
}

/// 1x1 reduce, 3x3, 1x1 expand, with a projected shortcut when widths differ.
#[derive(Clone, Debug)]
pub struct Bottleneck {
    conv1: ConvBn,
    conv2: ConvBn,
    conv3: ConvBn,
    downsample: Option<ConvBn>,
}

impl Bottleneck {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        in_channels: usize,
        planes: usize,
    ) -> Self {
        let out = planes * BOTTLENECK_EXPANSION;
        Self {
            conv1: ConvBn::new(store, rng, &format!("{name}.conv1"), in_channels, planes, 1, 1, true),
            conv2: ConvBn::new(store, rng, &format!("{name}.conv2"), planes, planes, 3, 1, true),
            conv3: ConvBn::new(store, rng, &format!("{name}.conv3"), planes, out, 1, 1, false),
            downsample: (in_channels != out).then(|| {
                ConvBn::new(store, rng, &format!("{name}.downsample"), in_channels, out, 1, 1, false)
            }),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let y = self.conv1.forward(g, x);
        let y = self.conv2.forward(g, y);
        let y = self.conv3.forward(g, y);
        let shortcut = match &self.downsample {
            Some(d) => d.forward(g, x),
            None => x,
        };
        let s = g.add(y, shortcut);
        g.relu(s)
    }
}

/// `x + BN(conv(ReLU(BN(conv(x)))))`.
#[derive(Clone, Debug)]
pub struct ResidualUnit {
    pub conv1: ConvBn,
    pub conv2: ConvBn,
}

impl ResidualUnit {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, name: &str, channels: usize) -> Self {
        Self {
            conv1: ConvBn::new(store, rng, &format!("{name}.conv1"), channels, channels, 3, 1, true),
            conv2: ConvBn::new(store, rng, &format!("{name}.conv2"), channels, channels, 3, 1, false),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let y = self.conv1.forward(g, x);
        let y = self.conv2.forward(g, y);
        g.add(x, y)
    }
}

/// Residual units composed in sequence on one branch.
#[derive(Clone, Debug)]
pub struct BasicBlock {
    pub units: Vec<ResidualUnit>,
    pub channels: usize,
}

impl BasicBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        channels: usize,
        units: usize,
    ) -> Self {
        Self {
            units: (0..units)
                .map(|u| ResidualUnit::new(store, rng, &format!("{name}.unit{u}"), channels))
                .collect(),
            channels,
        }
    }

    pub fn forward(&self, g: &mut Graph, h: &FeatureMap) -> Result<FeatureMap> {
        check_channels(g, h, self.channels, "basic block")?;
        let mut y = h.var;
        for unit in &self.units {
            y = unit.forward(g, y);
        }
        Ok(FeatureMap::new(y, h.level))
    }
}

/// Map from branch `source` to the resolution of branch `target`.
#[derive(Clone, Debug)]
pub enum CrossTransform {
    Identity,
    /// 1x1 conv + BN, then bilinear upsampling to the target size.
    Up(ConvBn),
    /// One stride-2 3x3 conv + BN per halving (ReLU between links).
    Down(Vec<ConvBn>),
}

/// Multi-resolution exchange: output k is `ReLU(sum_j T_{j->k}(H_j))`.
#[derive(Clone, Debug)]
pub struct Fusion {
    levels: Vec<(Level, usize)>,
    /// `transforms[target][source]`.
    transforms: Vec<Vec<CrossTransform>>,
}

impl Fusion {
    /// `levels` lists `(level, channels)` for consecutive branches starting at 1/4.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        levels: &[(Level, usize)],
    ) -> Self {
        let mut transforms = Vec::with_capacity(levels.len());
        for (k, &(_, ck)) in levels.iter().enumerate() {
            let mut row = Vec::with_capacity(levels.len());
            for (j, &(_, cj)) in levels.iter().enumerate() {
                let t = if j == k {
                    CrossTransform::Identity
                } else if j > k {
                    CrossTransform::Up(ConvBn::new(
                        store,
                        rng,
                        &format!("{name}.to{k}.from{j}"),
                        cj,
                        ck,
                        1,
                        1,
                        false,
                    ))
                } else {
                    let hops = k - j;
                    let chain = (0..hops)
                        .map(|h| {
                            let last = h + 1 == hops;
                            ConvBn::new(
                                store,
                                rng,
                                &format!("{name}.to{k}.from{j}.down{h}"),
                                cj,
                                if last { ck } else { cj },
                                3,
                                2,
                                !last,
                            )
                        })
                        .collect();
                    CrossTransform::Down(chain)
                };
                row.push(t);
            }
            transforms.push(row);
        }
        Self {
            levels: levels.to_vec(),
            transforms,
        }
    }

    pub fn transform(&self, target: usize, source: usize) -> &CrossTransform {
        &self.transforms[target][source]
    }

    pub fn forward(&self, g: &mut Graph, branches: &[FeatureMap]) -> Result<Vec<FeatureMap>> {
        if branches.len() != self.levels.len()
            || branches.iter().zip(&self.levels).any(|(b, (l, _))| b.level != *l)
        {
            return Err(Error::Contract(format!(
                "fusion built for levels {:?} received {:?}",
                self.levels.iter().map(|(l, _)| l.to_string()).collect::<Vec<_>>(),
                branches.iter().map(|b| b.level.to_string()).collect::<Vec<_>>()
            )));
        }
        for (b, &(_, c)) in branches.iter().zip(&self.levels) {
            check_channels(g, b, c, "fusion")?;
        }
        let mut outputs = Vec::with_capacity(branches.len());
        for (k, target) in branches.iter().enumerate() {
            let (_, th, tw) = target.dims(g);
            let mut acc: Option<Var> = None;
            for (j, source) in branches.iter().enumerate() {
                let t = match &self.transforms[k][j] {
                    CrossTransform::Identity => source.var,
                    CrossTransform::Up(cb) => {
                        let y = cb.forward(g, source.var);
                        g.resize_bilinear(y, th, tw)
                    }
                    CrossTransform::Down(chain) => {
                        let mut y = source.var;
                        for cb in chain {
                            y = cb.forward(g, y);
                        }
                        y
                    }
                };
                acc = Some(match acc {
                    Some(a) => g.add(a, t),
                    None => t,
                });
            }
            let y = g.relu(acc.expect("at least one branch"));
            outputs.push(FeatureMap::new(y, target.level));
        }
        Ok(outputs)
    }
}

/// Stride-2 3x3 conv + BN + ReLU that spawns the next lower-resolution branch.
#[derive(Clone, Debug)]
pub struct Transition {
    conv: ConvBn,
    from: Level,
    in_channels: usize,
}

impl Transition {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        from: Level,
        in_channels: usize,
        out_channels: usize,
    ) -> Result<Self> {
        if from.lower().is_none() {
            return Err(Error::Contract(format!(
                "no transition exists below level {from}"
            )));
        }
        Ok(Self {
            conv: ConvBn::new(store, rng, name, in_channels, out_channels, 3, 2, true),
            from,
            in_channels,
        })
    }

    pub fn forward(&self, g: &mut Graph, lowest: &FeatureMap) -> Result<FeatureMap> {
        let Some(next) = lowest.level.lower() else {
            return Err(Error::Contract(format!(
                "transition applied to level {}; branches end at 1/32",
                lowest.level
            )));
        };
        if lowest.level != self.from {
            return Err(Error::Contract(format!(
                "transition built for level {} received level {}",
                self.from, lowest.level
            )));
        }
        check_channels(g, lowest, self.in_channels, "transition")?;
        let y = self.conv.forward(g, lowest.var);
        Ok(FeatureMap::new(y, next))
    }
}

/// One multi-branch module: a Basic Block per branch followed by fusion.
#[derive(Clone, Debug)]
pub struct HrModule {
    pub branches: Vec<BasicBlock>,
    pub fusion: Fusion,
}

impl HrModule {
    pub fn forward(&self, g: &mut Graph, inputs: &[FeatureMap]) -> Result<Vec<FeatureMap>> {
        if inputs.len() != self.branches.len() {
            return Err(Error::Contract(format!(
                "module has {} branches, got {} inputs",
                self.branches.len(),
                inputs.len()
            )));
        }
        let h = inputs
            .iter()
            .zip(&self.branches)
            .map(|(x, b)| b.forward(g, x))
            .collect::<Result<Vec<_>>>()?;
        self.fusion.forward(g, &h)
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    config: BackboneConfig,
    multi_resolution: bool,
    pub stem: Stem,
    pub stage1: Vec<Bottleneck>,
    /// Projects the stage-1 output to the 1/4 branch width.
    pub stage1_projection: ConvBn,
    pub transitions: Vec<Transition>,
    /// Stages 2-4.
    pub stages: Vec<Vec<HrModule>>,
}

impl Backbone {
    /// With `multi_resolution == false` only the 1/4 branch is kept through stage 4:
    /// no transitions and no cross-resolution fusion.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        config: &BackboneConfig,
        multi_resolution: bool,
    ) -> Result<Self> {
        config.validate()?;
        let stem = Stem::new(store, rng, "backbone.stem", config.stem_width);
        let mut stage1 = Vec::with_capacity(config.bottleneck_units);
        let mut c = config.stem_width;
        for u in 0..config.bottleneck_units {
            stage1.push(Bottleneck::new(
                store,
                rng,
                &format!("backbone.stage1.unit{u}"),
                c,
                config.bottleneck_planes,
            ));
            c = config.stage1_channels();
        }
        let stage1_projection = ConvBn::new(
            store,
            rng,
            "backbone.stage1.projection",
            config.stage1_channels(),
            config.base_width,
            3,
            1,
            true,
        );
        let mut transitions = Vec::new();
        let mut stages = Vec::new();
        for stage in 2..=4usize {
            let branch_count = if multi_resolution { stage } else { 1 };
            if multi_resolution {
                let from = Level::from_index(stage - 2).expect("level");
                let in_c = if stage == 2 {
                    config.stage1_channels()
                } else {
                    config.width(from)
                };
                transitions.push(Transition::new(
                    store,
                    rng,
                    &format!("backbone.transition{}", stage - 1),
                    from,
                    in_c,
                    config.width(from.lower().expect("lower level")),
                )?);
            }
            let levels: Vec<(Level, usize)> = Level::ALL[..branch_count]
                .iter()
                .map(|&l| (l, config.width(l)))
                .collect();
            let modules = (0..config.modules_per_stage)
                .map(|m| {
                    let prefix = format!("backbone.stage{stage}.module{m}");
                    let branches = levels
                        .iter()
                        .enumerate()
                        .map(|(b, &(_, c))| {
                            BasicBlock::new(store, rng, &format!("{prefix}.branch{b}"), c, config.basic_units)
                        })
                        .collect();
                    let fusion = Fusion::new(store, rng, &format!("{prefix}.fuse"), &levels);
                    HrModule { branches, fusion }
                })
                .collect();
            stages.push(modules);
        }
        Ok(Self {
            config: config.clone(),
            multi_resolution,
            stem,
            stage1,
            stage1_projection,
            transitions,
            stages,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn multi_resolution(&self) -> bool {
        self.multi_resolution
    }

    /// Encoded representations F1..F4 (only F1 without multiple resolutions).
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Vec<FeatureMap>> {
        let f0 = self.stem.forward(g, x)?;
        let mut y = f0.var;
        for unit in &self.stage1 {
            y = unit.forward(g, y);
        }
        let stage1_out = FeatureMap::new(y, Level::QUARTER);
        let mut branches = vec![FeatureMap::new(
            self.stage1_projection.forward(g, stage1_out.var),
            Level::QUARTER,
        )];
        for (s, modules) in self.stages.iter().enumerate() {
            if self.multi_resolution {
                let lowest = if s == 0 {
                    stage1_out
                } else {
                    *branches.last().expect("branch")
                };
                branches.push(self.transitions[s].forward(g, &lowest)?);
            }
            for module in modules {
                branches = module.forward(g, &branches)?;
            }
        }
        Ok(branches)
    }
}
