//! The hybrid transformation network.
//!
//! A strided convolutional encoder produces a feature pyramid. Two branches
//! lift it to the BEV grid, one depth extent per pyramid level:
//!
//! * the geometric branch flattens each image column into depth bins with a
//!   learned dense map and resamples the resulting polar map through the
//!   pinhole model;
//! * the global branch learns a dense mapping from all image positions to
//!   the extent's BEV cells, optionally refined by cross-attention, and never
//!   sees the intrinsics.
//!
//! Each branch has its own decoder head; in hybrid mode the branch features
//! are also fused and decoded by a main head.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ConvSpec, Graph, ParamId, ParamStore, Var};
use crate::error::{bail, Result};
use crate::geometry::{build_resample_map, BevGridSpec, CameraIntrinsics, ResampleMap};
use crate::rng::{substream, StreamRng};
use crate::tensor::{Float, Tensor};

/// Which transformation branches are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Hybrid,
    CbftOnly,
    CfftOnly,
}

impl Mode {
    pub fn uses_geometric(self) -> bool {
        matches!(self, Mode::Hybrid | Mode::CbftOnly)
    }

    pub fn uses_global(self) -> bool {
        matches!(self, Mode::Hybrid | Mode::CfftOnly)
    }

    pub fn name(self) -> &'static str {
        match self {
            Mode::Hybrid => "hybrid",
            Mode::CbftOnly => "cbft_only",
            Mode::CfftOnly => "cfft_only",
        }
    }
}

/// Initialisation of the column-flattening maps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlatInit {
    /// Uniform random weights.
    Random,
    /// Depth bin `d` copies the feature row where the ground at that depth
    /// appears under the nominal intrinsics (inverse perspective mapping).
    GroundPrior,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub mode: Mode,
    pub num_classes: usize,
    /// Channels of each pyramid level.
    pub encoder_channels: Vec<usize>,
    /// Stride of each pyramid level; each doubles the previous one.
    pub strides: Vec<usize>,
    /// Channels of the BEV features produced by both branches.
    pub bev_channels: usize,
    /// Channels after fusing the two branches.
    pub fused_channels: usize,
    /// Hidden channels of the decoder heads.
    pub decoder_channels: usize,
    /// Cross-attention refinement in the global branch.
    pub relation: bool,
    pub relation_dim: usize,
    pub flat_init: FlatInit,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Hybrid,
            num_classes: 4,
            encoder_channels: vec![32, 64, 128],
            strides: vec![8, 16, 32],
            bev_channels: 64,
            fused_channels: 64,
            decoder_channels: 32,
            relation: false,
            relation_dim: 16,
            flat_init: FlatInit::GroundPrior,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self, grid: &BevGridSpec, image_height: usize, image_width: usize) -> Result<()> {
        let s = self.strides.len();
        if s == 0 || self.encoder_channels.len() != s {
            bail!(
                Config,
                "{} strides but {} encoder channel counts",
                s,
                self.encoder_channels.len()
            );
        }
        if s != grid.extents.len() {
            bail!(
                Config,
                "pyramid has {} scales but grid has {} depth extents",
                s,
                grid.extents.len()
            );
        }
        if self.strides[0] < 2 || self.strides[0] % 2 != 0 {
            bail!(Config, "first stride must be even and at least 2");
        }
        for w in self.strides.windows(2) {
            if w[1] != 2 * w[0] {
                bail!(Config, "strides must double per level, got {:?}", self.strides);
            }
        }
        let largest = *self.strides.last().unwrap();
        if image_height % largest != 0 || image_width % largest != 0 {
            bail!(
                Shape,
                "image {}x{} not divisible by largest stride {}",
                image_height,
                image_width,
                largest
            );
        }
        if self.num_classes == 0 || self.num_classes > 16 {
            bail!(Config, "class count must be in 1..=16");
        }
        if self.bev_channels == 0 || self.fused_channels == 0 || self.decoder_channels == 0 {
            bail!(Config, "channel counts must be positive");
        }
        if self.encoder_channels.iter().any(|&c| c < 2) {
            bail!(Config, "encoder channels must be at least 2");
        }
        if self.relation && self.relation_dim == 0 {
            bail!(Config, "relation dimension must be positive");
        }
        Ok(())
    }
}

/// Multi-scale frontal-view features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid<T> {
    pub levels: Vec<Tensor<T>>,
    pub strides: Vec<usize>,
}

/// Per-extent BEV features and their depth-axis concatenation.
#[derive(Debug, Clone, PartialEq)]
pub struct BevFeatureSet<T> {
    pub sub_features: Vec<Tensor<T>>,
    pub concatenated: Tensor<T>,
}

impl<T: Float> BevFeatureSet<T> {
    pub fn new(sub_features: Vec<Tensor<T>>) -> Result<Self> {
        let parts: Vec<&Tensor<T>> = sub_features.iter().collect();
        let concatenated = Tensor::concat(&parts, 1)?;
        Ok(Self {
            sub_features,
            concatenated,
        })
    }

    /// True when `concatenated` equals the stacked sub-features exactly.
    pub fn is_consistent(&self) -> bool {
        let parts: Vec<&Tensor<T>> = self.sub_features.iter().collect();
        Tensor::concat(&parts, 1)
            .map(|c| c == self.concatenated)
            .unwrap_or(false)
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.concatenated.shape() == other.concatenated.shape()
            && self.sub_features.len() == other.sub_features.len()
            && self
                .sub_features
                .iter()
                .zip(&other.sub_features)
                .all(|(a, b)| a.shape() == b.shape())
    }
}

/// Graph handles for a [`BevFeatureSet`].
#[derive(Debug, Clone)]
pub struct BevFeatureVars {
    pub sub: Vec<Var>,
    pub concatenated: Var,
}

impl BevFeatureVars {
    pub fn value<T: Float>(&self, g: &Graph<T>) -> BevFeatureSet<T> {
        BevFeatureSet {
            sub_features: self.sub.iter().map(|&v| g.value(v).clone()).collect(),
            concatenated: g.value(self.concatenated).clone(),
        }
    }
}

/// Everything a forward pass records in the graph.
#[derive(Debug, Clone)]
pub struct ForwardVars {
    pub mode: Mode,
    pub pyramid: Vec<Var>,
    pub scores: Var,
    pub geo_scores: Option<Var>,
    pub glo_scores: Option<Var>,
    pub geo: Option<BevFeatureVars>,
    pub glo: Option<BevFeatureVars>,
}

/// Plain-value model output.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutput<T> {
    /// `C x Z x W` occupancy probabilities.
    pub scores: Tensor<T>,
    pub geo_scores: Option<Tensor<T>>,
    pub glo_scores: Option<Tensor<T>>,
    pub geo_features: Option<BevFeatureSet<T>>,
    pub glo_features: Option<BevFeatureSet<T>>,
}

impl<T: Float> ModelOutput<T> {
    pub fn from_graph(g: &Graph<T>, f: &ForwardVars) -> Self {
        Self {
            scores: g.value(f.scores).clone(),
            geo_scores: f.geo_scores.map(|v| g.value(v).clone()),
            glo_scores: f.glo_scores.map(|v| g.value(v).clone()),
            geo_features: f.geo.as_ref().map(|b| b.value(g)),
            glo_features: f.glo.as_ref().map(|b| b.value(g)),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.scores.is_finite()
            && self.geo_scores.as_ref().is_none_or(Tensor::is_finite)
            && self.glo_scores.as_ref().is_none_or(Tensor::is_finite)
    }
}

/// Decoder head selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    Main,
    Geo,
    Glo,
}

impl Head {
    fn prefix(self) -> &'static str {
        match self {
            Head::Main => "dec.main",
            Head::Geo => "dec.geo",
            Head::Glo => "dec.glo",
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Dense {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone)]
struct Relation {
    q: ParamId,
    k: ParamId,
    v: ParamId,
}

#[derive(Debug, Clone)]
struct GlobalExtent {
    proj: Dense,
    map: Dense,
    relation: Option<Relation>,
}

#[derive(Debug, Clone, Copy)]
struct Decoder {
    hidden: Dense,
    out: Dense,
}

#[derive(Debug, Clone)]
struct Layers {
    stem: Dense,
    stages: Vec<Dense>,
    flat: Option<Vec<Dense>>,
    global: Option<Vec<GlobalExtent>>,
    fuse: Option<Dense>,
    decoders: HashMap<&'static str, Decoder>,
}

/// Trainable-parameter counts per submodule.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub per_submodule: Vec<(String, usize)>,
    pub total: usize,
}

impl ParamCount {
    pub fn get(&self, name: &str) -> usize {
        self.per_submodule
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, c)| *c)
            .unwrap_or(0)
    }
}

/// Submodule name prefixes, in reporting order.
pub const SUBMODULES: [&str; 7] = [
    "encoder", "geo", "glo", "fuse", "dec.main", "dec.geo", "dec.glo",
];

type MapKey = ([u64; 5], usize, usize, usize, usize);

/// The network plus its parameters.
pub struct Model<T: Float> {
    pub config: ModelConfig,
    pub grid: BevGridSpec,
    pub image_height: usize,
    pub image_width: usize,
    pub params: ParamStore<T>,
    layers: Layers,
    maps: Mutex<HashMap<MapKey, Arc<ResampleMap>>>,
}

impl<T: Float> Clone for Model<T> {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            grid: self.grid.clone(),
            image_height: self.image_height,
            image_width: self.image_width,
            params: self.params.clone(),
            layers: self.layers.clone(),
            maps: Mutex::new(self.maps.lock().expect("map cache").clone()),
        }
    }
}

fn uniform<T: Float>(rng: &mut StreamRng, shape: &[usize], bound: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| T::f(rng.random_range(-bound..=bound)))
        .collect();
    Tensor::from_vec(shape, data).expect("consistent shape")
}

struct Builder<'a, T: Float> {
    store: ParamStore<T>,
    rng: &'a mut StreamRng,
}

impl<T: Float> Builder<'_, T> {
    fn weight(&mut self, name: &str, shape: &[usize], fan_in: usize, gain: f64) -> ParamId {
        let bound = (3.0 * gain / fan_in as f64).sqrt();
        let w = uniform(self.rng, shape, bound);
        self.store.add(name, w)
    }

    /// Weight with variance `gain / fan_in`, zero bias.
    fn dense(&mut self, name: &str, w_shape: &[usize], bias_len: usize, fan_in: usize, gain: f64) -> Dense {
        let bound = (3.0 * gain / fan_in as f64).sqrt();
        let w = uniform(self.rng, w_shape, bound);
        Dense {
            w: self.store.add(format!("{name}.w"), w),
            b: self.store.add(format!("{name}.b"), Tensor::zeros(&[bias_len])),
        }
    }
}

fn intr_key(intr: &CameraIntrinsics) -> [u64; 5] {
    [
        intr.fx.to_bits(),
        intr.fy.to_bits(),
        intr.cx.to_bits(),
        intr.cy.to_bits(),
        intr.cam_height.to_bits(),
    ]
}

impl<T: Float> Model<T> {
    /// Builds the submodules needed by `config.mode`. `nominal` intrinsics
    /// seed the ground-prior initialisation of the flattening maps.
    pub fn new(
        config: ModelConfig,
        grid: BevGridSpec,
        nominal: &CameraIntrinsics,
        seed: u64,
    ) -> Result<Self> {
        grid.validate()?;
        nominal.validate()?;
        let (ih, iw) = (nominal.image_height, nominal.image_width);
        config.validate(&grid, ih, iw)?;
        let mut rng = substream(seed, "init");
        let mut b = Builder {
            store: ParamStore::new(),
            rng: &mut rng,
        };
        let s = config.strides.len();
        let cb = config.bev_channels;

        let stem_out = (config.encoder_channels[0] / 2).max(1);
        let stem_k = config.strides[0] / 2;
        let stem = b.dense(
            "encoder.stem",
            &[stem_out, 3, stem_k, stem_k],
            stem_out,
            3 * stem_k * stem_k,
            2.0,
        );
        let mut stages = Vec::with_capacity(s);
        let mut cin = stem_out;
        for (i, &cout) in config.encoder_channels.iter().enumerate() {
            stages.push(b.dense(
                &format!("encoder.stage{i}"),
                &[cout, cin, 3, 3],
                cout,
                cin * 9,
                2.0,
            ));
            cin = cout;
        }

        let level_dims = |e: usize| {
            let level = s - 1 - e;
            let stride = config.strides[level];
            (level, config.encoder_channels[level], ih / stride, iw / stride)
        };

        let flat = if config.mode.uses_geometric() {
            let mut v = Vec::with_capacity(s);
            for e in 0..s {
                let (level, cs, hs, _) = level_dims(e);
                let depth = grid.extent_depth_cells(e);
                let d = b.dense(
                    &format!("geo.flat{e}"),
                    &[cb * depth, cs * hs],
                    cb * depth,
                    cs * hs,
                    1.0,
                );
                if config.flat_init == FlatInit::GroundPrior {
                    let w = ground_prior_flat::<T>(
                        nominal,
                        grid.extents[e],
                        depth,
                        config.strides[level],
                        cs,
                        hs,
                        cb,
                    );
                    b.store.set(d.w, w)?;
                }
                v.push(d);
            }
            Some(v)
        } else {
            None
        };

        let global = if config.mode.uses_global() {
            let mut v = Vec::with_capacity(s);
            for e in 0..s {
                let (_, cs, hs, ws) = level_dims(e);
                let p_in = hs * ws;
                let p_out = grid.extent_depth_cells(e) * grid.lateral_cells;
                let proj = b.dense(&format!("glo.proj{e}"), &[cb, cs], cb, cs, 2.0);
                let map = b.dense(&format!("glo.map{e}"), &[p_out, p_in], p_out, p_in, 1.0);
                let relation = config.relation.then(|| {
                    let d = config.relation_dim;
                    Relation {
                        q: b.weight(&format!("glo.rel{e}.q"), &[d, cb], cb, 1.0),
                        k: b.weight(&format!("glo.rel{e}.k"), &[d, cb], cb, 1.0),
                        v: b.weight(&format!("glo.rel{e}.v"), &[cb, cb], cb, 1.0),
                    }
                });
                v.push(GlobalExtent { proj, map, relation });
            }
            Some(v)
        } else {
            None
        };

        let fuse = (config.mode == Mode::Hybrid).then(|| {
            b.dense(
                "fuse",
                &[config.fused_channels, 2 * cb],
                config.fused_channels,
                2 * cb,
                1.0,
            )
        });

        let mut decoders = HashMap::new();
        let mut add_decoder = |b: &mut Builder<T>, head: Head, cin: usize| {
            let cd = config.decoder_channels;
            let hidden = b.dense(
                &format!("{}.hidden", head.prefix()),
                &[cd, cin, 3, 3],
                cd,
                cin * 9,
                2.0,
            );
            let out = b.dense(
                &format!("{}.out", head.prefix()),
                &[config.num_classes, cd, 1, 1],
                config.num_classes,
                cd,
                1.0,
            );
            decoders.insert(head.prefix(), Decoder { hidden, out });
        };
        if config.mode == Mode::Hybrid {
            add_decoder(&mut b, Head::Main, config.fused_channels);
        }
        if config.mode.uses_geometric() {
            add_decoder(&mut b, Head::Geo, cb);
        }
        if config.mode.uses_global() {
            add_decoder(&mut b, Head::Glo, cb);
        }

        let layers = Layers {
            stem,
            stages,
            flat,
            global,
            fuse,
            decoders,
        };

        Ok(Self {
            config,
            grid,
            image_height: ih,
            image_width: iw,
            params: b.store,
            layers,
            maps: Mutex::new(HashMap::new()),
        })
    }

    pub fn num_levels(&self) -> usize {
        self.config.strides.len()
    }

    /// Pyramid level feeding depth extent `extent`: the nearest extent reads
    /// the coarsest level.
    pub fn level_for_extent(&self, extent: usize) -> usize {
        self.num_levels() - 1 - extent
    }

    /// Exact trainable-parameter counts per submodule and in total.
    pub fn param_count(&self) -> ParamCount {
        let per_submodule: Vec<(String, usize)> = SUBMODULES
            .iter()
            .map(|&p| (p.to_string(), self.params.count_with_prefix(&format!("{p}."))))
            .collect();
        ParamCount {
            total: self.params.total_count(),
            per_submodule,
        }
    }

    /// Cached resampling table for extent `extent` under `intr`.
    pub fn resample_map(&self, intr: &CameraIntrinsics, extent: usize) -> Result<Arc<ResampleMap>> {
        let level = self.level_for_extent(extent);
        let stride = self.config.strides[level];
        let key = (intr_key(intr), intr.image_width, intr.image_height, stride, extent);
        if let Some(m) = self.maps.lock().expect("map cache").get(&key) {
            return Ok(Arc::clone(m));
        }
        let map = Arc::new(build_resample_map(intr, &self.grid, stride, extent)?);
        self.maps
            .lock()
            .expect("map cache")
            .insert(key, Arc::clone(&map));
        Ok(map)
    }

    fn check_image(&self, shape: &[usize]) -> Result<()> {
        if shape != [3, self.image_height, self.image_width] {
            bail!(
                Shape,
                "image {:?} does not match model input 3x{}x{}",
                shape,
                self.image_height,
                self.image_width
            );
        }
        Ok(())
    }

    fn conv(g: &mut Graph<T>, x: Var, d: Dense, stride: usize, pad: usize) -> Result<Var> {
        let w = g.param(d.w);
        let b = g.param(d.b);
        g.conv2d(x, w, b, ConvSpec { stride, pad })
    }

    /// Shared encoder: a patchifying stem and one strided stage per level.
    pub fn encode(&self, g: &mut Graph<T>, image: Var) -> Result<Vec<Var>> {
        let s = g.shape(image).to_vec();
        if s.len() != 3 || s[0] != 3 {
            bail!(Shape, "image must be 3xHxW, got {:?}", s);
        }
        let largest = *self.config.strides.last().unwrap();
        if s[1] % largest != 0 || s[2] % largest != 0 {
            bail!(
                Shape,
                "image {}x{} not divisible by largest stride {}",
                s[1],
                s[2],
                largest
            );
        }
        let k = self.config.strides[0] / 2;
        let x = Self::conv(g, image, self.layers.stem, k, 0)?;
        let mut x = g.relu(x);
        let mut levels = Vec::with_capacity(self.layers.stages.len());
        for &stage in &self.layers.stages {
            let y = Self::conv(g, x, stage, 2, 1)?;
            x = g.relu(y);
            levels.push(x);
        }
        Ok(levels)
    }

    fn check_pyramid(&self, g: &Graph<T>, pyr: &[Var]) -> Result<()> {
        if pyr.len() != self.grid.extents.len() {
            bail!(
                Config,
                "pyramid has {} levels, grid has {} extents",
                pyr.len(),
                self.grid.extents.len()
            );
        }
        for (i, &v) in pyr.iter().enumerate() {
            let s = g.shape(v);
            let stride = self.config.strides[i];
            let want = [
                self.config.encoder_channels[i],
                self.image_height / stride,
                self.image_width / stride,
            ];
            if s != want {
                bail!(Shape, "pyramid level {} is {:?}, expected {:?}", i, s, want);
            }
        }
        Ok(())
    }

    /// Geometric branch: column flattening followed by pinhole resampling.
    pub fn geometric_transform(
        &self,
        g: &mut Graph<T>,
        pyr: &[Var],
        intr: &CameraIntrinsics,
    ) -> Result<BevFeatureVars> {
        let Some(flat) = &self.layers.flat else {
            bail!(Config, "model was built without the geometric branch");
        };
        self.check_pyramid(g, pyr)?;
        if intr.image_width != self.image_width || intr.image_height != self.image_height {
            bail!(Config, "intrinsics image size does not match the model");
        }
        let cb = self.config.bev_channels;
        let mut sub = Vec::with_capacity(pyr.len());
        for (e, d) in flat.iter().enumerate() {
            let x = pyr[self.level_for_extent(e)];
            let s = g.shape(x).to_vec();
            let cols = g.reshape(x, &[s[0] * s[1], s[2]])?;
            let w = g.param(d.w);
            let y = g.matmul(w, cols, false, false)?;
            let bias = g.param(d.b);
            let y = g.add_channel_bias(y, bias)?;
            let depth = self.grid.extent_depth_cells(e);
            let polar = g.reshape(y, &[cb, depth, s[2]])?;
            let map = self.resample_map(intr, e)?;
            sub.push(g.resample(polar, map)?);
        }
        let concatenated = g.concat(&sub, 1)?;
        Ok(BevFeatureVars { sub, concatenated })
    }

    /// Global branch: dense FV-to-BEV position mapping, no intrinsics.
    pub fn global_transform(&self, g: &mut Graph<T>, pyr: &[Var]) -> Result<BevFeatureVars> {
        let Some(global) = &self.layers.global else {
            bail!(Config, "model was built without the global branch");
        };
        self.check_pyramid(g, pyr)?;
        let cb = self.config.bev_channels;
        let mut sub = Vec::with_capacity(pyr.len());
        for (e, ge) in global.iter().enumerate() {
            let x = pyr[self.level_for_extent(e)];
            let s = g.shape(x).to_vec();
            let tokens = g.reshape(x, &[s[0], s[1] * s[2]])?;
            let pw = g.param(ge.proj.w);
            let p = g.matmul(pw, tokens, false, false)?;
            let pb = g.param(ge.proj.b);
            let p = g.add_channel_bias(p, pb)?;
            let p = g.relu(p);
            let mw = g.param(ge.map.w);
            let m = g.matmul(p, mw, false, true)?;
            let mb = g.param(ge.map.b);
            let mut m = g.add_position_bias(m, mb)?;
            if let Some(rel) = &ge.relation {
                let (q, k, v) = (g.param(rel.q), g.param(rel.k), g.param(rel.v));
                let q = g.matmul(q, m, false, false)?;
                let k = g.matmul(k, p, false, false)?;
                let v = g.matmul(v, p, false, false)?;
                let logits = g.matmul(q, k, true, false)?;
                let logits = g.scale(logits, T::f(1.0 / (self.config.relation_dim as f64).sqrt()));
                let attn = g.softmax_rows(logits)?;
                let ctx = g.matmul(v, attn, false, true)?;
                m = g.add(m, ctx)?;
            }
            let depth = self.grid.extent_depth_cells(e);
            sub.push(g.reshape(m, &[cb, depth, self.grid.lateral_cells])?);
        }
        let concatenated = g.concat(&sub, 1)?;
        Ok(BevFeatureVars { sub, concatenated })
    }

    /// Channel concatenation followed by a learned 1x1 projection.
    pub fn fuse(&self, g: &mut Graph<T>, geo: Var, glo: Var) -> Result<Var> {
        let Some(fuse) = self.layers.fuse else {
            bail!(Config, "model was built without the fusion layer");
        };
        if g.shape(geo) != g.shape(glo) {
            bail!(
                Shape,
                "fuse inputs differ: {:?} vs {:?}",
                g.shape(geo),
                g.shape(glo)
            );
        }
        let s = g.shape(geo).to_vec();
        let x = g.concat(&[geo, glo], 0)?;
        let x = g.reshape(x, &[2 * s[0], s[1] * s[2]])?;
        let w = g.param(fuse.w);
        let y = g.matmul(w, x, false, false)?;
        let b = g.param(fuse.b);
        let y = g.add_channel_bias(y, b)?;
        g.reshape(y, &[self.config.fused_channels, s[1], s[2]])
    }

    /// Decoder logits (before the logistic squashing).
    pub fn decode_logits(&self, g: &mut Graph<T>, head: Head, x: Var) -> Result<Var> {
        let Some(&dec) = self.layers.decoders.get(head.prefix()) else {
            bail!(Config, "model has no {:?} decoder", head);
        };
        let h = Self::conv(g, x, dec.hidden, 1, 1)?;
        let h = g.relu(h);
        Self::conv(g, h, dec.out, 1, 0)
    }

    /// Per-class occupancy probabilities from a BEV feature map.
    pub fn decode(&self, g: &mut Graph<T>, head: Head, x: Var) -> Result<Var> {
        let logits = self.decode_logits(g, head, x)?;
        Ok(g.sigmoid(logits))
    }

    /// Records a full forward pass. `image` is `3 x H x W`.
    pub fn forward_graph(
        &self,
        g: &mut Graph<T>,
        image: &Tensor<T>,
        intr: &CameraIntrinsics,
        mode: Mode,
    ) -> Result<ForwardVars> {
        self.check_image(image.shape())?;
        let img = g.constant(image.clone());
        let pyramid = self.encode(g, img)?;
        let geo = if mode.uses_geometric() {
            Some(self.geometric_transform(g, &pyramid, intr)?)
        } else {
            None
        };
        let glo = if mode.uses_global() {
            Some(self.global_transform(g, &pyramid)?)
        } else {
            None
        };
        let geo_scores = match &geo {
            Some(f) => Some(self.decode(g, Head::Geo, f.concatenated)?),
            None => None,
        };
        let glo_scores = match &glo {
            Some(f) => Some(self.decode(g, Head::Glo, f.concatenated)?),
            None => None,
        };
        let scores = match (mode, &geo, &glo) {
            (Mode::Hybrid, Some(a), Some(b)) => {
                let fused = self.fuse(g, a.concatenated, b.concatenated)?;
                self.decode(g, Head::Main, fused)?
            }
            (Mode::CbftOnly, _, _) => geo_scores.expect("geometric scores"),
            (Mode::CfftOnly, _, _) => glo_scores.expect("global scores"),
            _ => unreachable!("hybrid mode always builds both branches"),
        };
        Ok(ForwardVars {
            mode,
            pyramid,
            scores,
            geo_scores,
            glo_scores,
            geo,
            glo,
        })
    }

    /// Inference forward pass.
    pub fn forward(
        &self,
        image: &Tensor<T>,
        intr: &CameraIntrinsics,
        mode: Mode,
    ) -> Result<ModelOutput<T>> {
        let mut g = Graph::new(&self.params);
        let f = self.forward_graph(&mut g, image, intr, mode)?;
        Ok(ModelOutput::from_graph(&g, &f))
    }

    /// Feature pyramid for an image.
    pub fn encode_image(&self, image: &Tensor<T>) -> Result<FeaturePyramid<T>> {
        self.check_image(image.shape())?;
        let mut g = Graph::new(&self.params);
        let img = g.constant(image.clone());
        let levels = self.encode(&mut g, img)?;
        Ok(FeaturePyramid {
            levels: levels.iter().map(|&v| g.value(v).clone()).collect(),
            strides: self.config.strides.clone(),
        })
    }
}

/// Ground-prior weights for one flattening map (`C_b*D x C_s*H_s`).
fn ground_prior_flat<T: Float>(
    nominal: &CameraIntrinsics,
    (z_lo, z_hi): (f64, f64),
    depth: usize,
    stride: usize,
    cs: usize,
    hs: usize,
    cb: usize,
) -> Tensor<T> {
    let mut w = Tensor::zeros(&[cb * depth, cs * hs]);
    let cols = cs * hs;
    for d in 0..depth {
        let z = if depth > 1 {
            z_lo + d as f64 / (depth - 1) as f64 * (z_hi - z_lo)
        } else {
            z_lo
        };
        let v = nominal.fy * nominal.cam_height / z + nominal.cy;
        let row = ((v / stride as f64).floor().max(0.0) as usize).min(hs - 1);
        for c in 0..cb.min(cs) {
            w.data_mut()[(c * depth + d) * cols + c * hs + row] = T::one();
        }
    }
    w
}

/// Converts an `H x W x 3` interleaved image to the `3 x H x W` network layout.
pub fn image_to_chw<T: Float>(hwc: &[f32], height: usize, width: usize) -> Result<Tensor<T>> {
    if hwc.len() != height * width * 3 {
        bail!(Shape, "image buffer has {} values for {}x{}x3", hwc.len(), height, width);
    }
    let mut out = vec![T::zero(); hwc.len()];
    let plane = height * width;
    for p in 0..plane {
        for c in 0..3 {
            out[c * plane + p] = T::f(hwc[p * 3 + c] as f64);
        }
    }
    Tensor::from_vec(&[3, height, width], out)
}
