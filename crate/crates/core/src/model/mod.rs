//! Asymmetric masked autoencoder over a `(time, source, patch)` token lattice.
//!
//! The encoder sees only visible tokens; the decoder fills masked slots with a
//! shared mask token and reconstructs every slot through per-source heads.
//! The model is generic over the float type so the same code runs training in
//! `f32` and gradient verification in `f64`. Backward passes are written by
//! hand against the flat [`ParamLayout`].

pub mod gradcheck;
pub mod loss;
pub mod nn;
pub mod params;

use ndarray::{s, Array2, Array3, ArrayView2, ArrayView3, Axis, NdFloat};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::encoding::{self, TimeTablesView, SOURCE_DIM, TIME_COMPONENT_DIM, TIME_DIM, TIME_VOCABS};
use crate::masking::Mask;
use crate::rng::keyed_rng;
use crate::{key, Error, Result, SourceProfile, Timestamp, GRID_SIZE, NUM_PATCHES, PATCH_SIZE};

pub use gradcheck::{grad_check, GradCheckReport};
pub use loss::{masked_mse, masked_mse_grad, patch_target, patch_targets};
use nn::{block_backward, block_forward, layer_norm, layer_norm_backward, linear, linear_backward, BlockCache, BlockIds, LayerNormCache};
pub use params::{ParamEntry, ParamId, ParamLayout};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Token width; equals the composite encoding width.
    pub width: usize,
    pub encoder_depth: usize,
    pub decoder_width: usize,
    pub decoder_depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub patch: usize,
    pub norm_pix: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            width: 256,
            encoder_depth: 4,
            decoder_width: 128,
            decoder_depth: 2,
            heads: 4,
            mlp_ratio: 4,
            patch: PATCH_SIZE,
            norm_pix: true,
        }
    }
}

impl ModelConfig {
    /// A small configuration for finite-difference checks: positional width
    /// 8, so tokens are 136 wide.
    pub fn tiny() -> Self {
        Self {
            width: encoding::composite_dim(8),
            encoder_depth: 1,
            decoder_width: 16,
            decoder_depth: 1,
            heads: 2,
            mlp_ratio: 2,
            patch: PATCH_SIZE,
            norm_pix: true,
        }
    }

    /// Width of the positional part of the composite encoding.
    pub fn pos_dim(&self) -> usize {
        self.width.saturating_sub(SOURCE_DIM + TIME_DIM)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.patch != PATCH_SIZE {
            return bad(format!("patch {} (tokens are {PATCH_SIZE}x{PATCH_SIZE})", self.patch));
        }
        let pos = self.pos_dim();
        if pos == 0 || pos % 4 != 0 {
            return bad(format!(
                "width {} leaves positional width {pos}; it must be positive and divisible by 4",
                self.width
            ));
        }
        if self.heads == 0 || self.width % self.heads != 0 || self.decoder_width % self.heads != 0 {
            return bad(format!(
                "widths {}/{} not divisible by {} heads",
                self.width, self.decoder_width, self.heads
            ));
        }
        if self.mlp_ratio == 0 || self.decoder_width == 0 {
            return bad("mlp_ratio and decoder_width must be positive".into());
        }
        Ok(())
    }
}

/// A registered source: its name and band count.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceSpec {
    pub name: String,
    pub bands: usize,
}

impl SourceSpec {
    pub fn new(name: impl Into<String>, bands: usize) -> Self {
        Self { name: name.into(), bands }
    }

    /// Length of one flattened patch.
    pub fn patch_dim(&self) -> usize {
        self.bands * PATCH_SIZE * PATCH_SIZE
    }
}

impl From<&SourceProfile> for SourceSpec {
    fn from(p: &SourceProfile) -> Self {
        Self::new(p.name.clone(), p.bands)
    }
}

type Pair = (ParamId, ParamId);

#[derive(Debug, Clone)]
struct Ids {
    tokenizers: Vec<Pair>,
    source_table: ParamId,
    time_tables: [ParamId; 4],
    encoder: Vec<BlockIds>,
    encoder_norm: Pair,
    decoder_embed: Pair,
    decoder_encoding: Pair,
    mask_token: ParamId,
    decoder: Vec<BlockIds>,
    decoder_norm: Pair,
    heads: Vec<Pair>,
}

/// One source's patches within a sample: `(t, NUM_PATCHES, bands·256)`.
#[derive(Debug, Clone)]
pub struct SourceInput<'a> {
    /// Index into the model's registered sources.
    pub source: usize,
    pub patches: ArrayView3<'a, f32>,
}

/// One training sample: shared timestamps and the patches of each source.
/// The lattice source axis follows the order of `sources`.
#[derive(Debug, Clone)]
pub struct SampleView<'a> {
    pub timestamps: &'a [Timestamp],
    pub sources: Vec<SourceInput<'a>>,
}

/// Loss of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleLoss {
    pub loss: f64,
    /// Per sample source, `None` when it had no masked slot.
    pub per_source: Vec<Option<f64>>,
}

struct TokenGroup<F> {
    /// Rows of the visible-token matrix that belong to this source.
    rows: Vec<usize>,
    input: Array2<F>,
}

struct Trace<F> {
    dims: (usize, usize, usize),
    encodings: Array2<F>,
    visible: Vec<usize>,
    groups: Vec<TokenGroup<F>>,
    encoder: Vec<BlockCache<F>>,
    encoder_norm: LayerNormCache<F>,
    latents: Array2<F>,
    decoder: Vec<BlockCache<F>>,
    decoder_norm: LayerNormCache<F>,
    hidden: Array2<F>,
}

#[derive(Debug, Clone)]
pub struct MaeModel {
    config: ModelConfig,
    sources: Vec<SourceSpec>,
    layout: ParamLayout,
    ids: Ids,
    positional: Array2<f64>,
}

fn check_finite<F: NdFloat>(x: &Array2<F>, what: &str) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

fn cast<F: NdFloat>(v: f64) -> F {
    F::from(v).unwrap()
}

impl MaeModel {
    pub fn new(config: ModelConfig, sources: Vec<SourceSpec>) -> Result<Self> {
        config.validate()?;
        if sources.is_empty() {
            return Err(Error::Empty("model sources"));
        }
        for (i, s) in sources.iter().enumerate() {
            if s.bands == 0 {
                return Err(Error::InvalidArgument(format!("source {} has no bands", s.name)));
            }
            if sources[..i].iter().any(|o| o.name == s.name) {
                return Err(Error::InvalidArgument(format!("duplicate source {}", s.name)));
            }
        }
        let (w, wd) = (config.width, config.decoder_width);
        let mut l = ParamLayout::default();
        let pair = |l: &mut ParamLayout, name: &str, rows: usize, cols: usize| {
            (
                l.push(format!("{name}.weight"), &[rows, cols], true),
                l.push(format!("{name}.bias"), &[cols], false),
            )
        };
        let tokenizers = sources
            .iter()
            .map(|s| pair(&mut l, &format!("tokenizer.{}", s.name), s.patch_dim(), w))
            .collect();
        let source_table = l.push("encoding.source", &[sources.len(), SOURCE_DIM], true);
        let time_tables = ["year", "month", "day", "hour"]
            .iter()
            .zip(TIME_VOCABS)
            .map(|(n, v)| l.push(format!("encoding.time.{n}"), &[v, TIME_COMPONENT_DIM], true))
            .collect::<Vec<_>>()
            .try_into()
            .expect("four tables");
        let encoder = (0..config.encoder_depth)
            .map(|i| BlockIds::register(&mut l, &format!("encoder.blocks.{i}"), w, w * config.mlp_ratio))
            .collect();
        let norm = |l: &mut ParamLayout, name: &str, width: usize| {
            (
                l.push(format!("{name}.weight"), &[width], false),
                l.push(format!("{name}.bias"), &[width], false),
            )
        };
        let encoder_norm = norm(&mut l, "encoder.norm", w);
        let decoder_embed = pair(&mut l, "decoder.embed", w, wd);
        let decoder_encoding = pair(&mut l, "decoder.encoding_proj", w, wd);
        let mask_token = l.push("decoder.mask_token", &[wd], false);
        let decoder = (0..config.decoder_depth)
            .map(|i| BlockIds::register(&mut l, &format!("decoder.blocks.{i}"), wd, wd * config.mlp_ratio))
            .collect();
        let decoder_norm = norm(&mut l, "decoder.norm", wd);
        let heads = sources
            .iter()
            .map(|s| pair(&mut l, &format!("decoder.head.{}", s.name), wd, s.patch_dim()))
            .collect();
        let ids = Ids {
            tokenizers,
            source_table,
            time_tables,
            encoder,
            encoder_norm,
            decoder_embed,
            decoder_encoding,
            mask_token,
            decoder,
            decoder_norm,
            heads,
        };
        let positional = encoding::positional_grid(config.pos_dim(), GRID_SIZE)?;
        Ok(Self { config, sources, layout: l, ids, positional })
    }

    pub fn from_profiles(config: ModelConfig, profiles: &[SourceProfile]) -> Result<Self> {
        Self::new(config, profiles.iter().map(SourceSpec::from).collect())
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn sources(&self) -> &[SourceSpec] {
        &self.sources
    }

    pub fn source_index(&self, name: &str) -> Result<usize> {
        self.sources
            .iter()
            .position(|s| s.name == name)
            .ok_or_else(|| Error::UnknownSource(name.to_string()))
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn num_params(&self) -> usize {
        self.layout.len()
    }

    /// Fresh parameters. Every tensor draws from its own keyed stream, so a
    /// tensor's values depend only on the seed and its name.
    pub fn init_params<F: NdFloat>(&self, seed: u64) -> Vec<F> {
        let mut out = vec![F::zero(); self.layout.len()];
        for e in self.layout.entries() {
            let mut rng = keyed_rng(key![seed, "init", e.name.as_str()]);
            let dst = &mut out[e.range()];
            let name = e.name.as_str();
            if name.starts_with("encoding.") {
                let n = Normal::new(0.0, 1.0).unwrap();
                dst.iter_mut().for_each(|v| *v = cast(n.sample(&mut rng)));
            } else if name == "decoder.mask_token" {
                let n = Normal::new(0.0, 0.02).unwrap();
                dst.iter_mut().for_each(|v| *v = cast(n.sample(&mut rng)));
            } else if e.shape.len() == 2 {
                let bound = (6.0 / (e.shape[0] + e.shape[1]) as f64).sqrt();
                dst.iter_mut().for_each(|v| *v = cast(rng.gen_range(-bound..bound)));
            } else if name.contains("norm") && name.ends_with(".weight") {
                dst.fill(F::one());
            }
        }
        out
    }

    fn time_tables<'a, F>(&self, params: &'a [F]) -> TimeTablesView<'a, F> {
        let [y, m, d, h] = self.ids.time_tables;
        TimeTablesView {
            year: self.layout.mat(params, y),
            month: self.layout.mat(params, m),
            day: self.layout.mat(params, d),
            hour: self.layout.mat(params, h),
        }
    }

    /// Composite encodings of the full lattice, `(t·s·p, W)` in `(t, s, p)`
    /// row-major order.
    pub fn encodings<F: NdFloat>(&self, params: &[F], timestamps: &[Timestamp], source_ids: &[usize]) -> Result<Array2<F>> {
        let time = encoding::embed_time(timestamps, self.time_tables(params));
        let src = encoding::embed_source(source_ids, self.layout.mat(params, self.ids.source_table))?;
        let pos = self.positional.mapv(cast::<F>);
        encoding::compose_encoding_flat(pos.view(), src.view(), time.view())
    }

    fn check_sample(&self, sample: &SampleView<'_>, mask: &Mask) -> Result<(usize, usize, usize)> {
        let t = sample.timestamps.len();
        let s = sample.sources.len();
        if t == 0 || s == 0 {
            return Err(Error::Empty("sample lattice"));
        }
        for (i, src) in sample.sources.iter().enumerate() {
            let spec = self
                .sources
                .get(src.source)
                .ok_or_else(|| Error::UnknownSource(format!("source id {}", src.source)))?;
            if sample.sources[..i].iter().any(|o| o.source == src.source) {
                return Err(Error::InvalidArgument(format!("source {} appears twice", spec.name)));
            }
            let want = (t, NUM_PATCHES, spec.patch_dim());
            if src.patches.dim() != want {
                return Err(Error::Shape(format!(
                    "{} patches {:?}, expected {want:?}",
                    spec.name,
                    src.patches.dim()
                )));
            }
        }
        if mask.dims() != (t, s, NUM_PATCHES) {
            return Err(Error::Shape(format!(
                "mask {:?} for lattice ({t}, {s}, {NUM_PATCHES})",
                mask.dims()
            )));
        }
        Ok((t, s, NUM_PATCHES))
    }

    fn embed_tokens<F: NdFloat>(&self, params: &[F], sample: &SampleView<'_>, visible: &[usize], s: usize, p: usize) -> (Array2<F>, Vec<TokenGroup<F>>) {
        let mut tokens = Array2::zeros((visible.len(), self.config.width));
        let mut groups = Vec::with_capacity(s);
        for (si, src) in sample.sources.iter().enumerate() {
            let rows: Vec<usize> = (0..visible.len()).filter(|&j| (visible[j] / p) % s == si).collect();
            let mut input = Array2::zeros((rows.len(), src.patches.dim().2));
            for (k, &j) in rows.iter().enumerate() {
                let idx = visible[j];
                let patch = src.patches.slice(s![idx / (s * p), idx % p, ..]);
                input.row_mut(k).zip_mut_with(&patch, |o, &v| *o = F::from(v).unwrap());
            }
            let (w, b) = self.ids.tokenizers[src.source];
            let out = linear(input.view(), self.layout.mat(params, w), self.layout.vec(params, b));
            for (k, &j) in rows.iter().enumerate() {
                tokens.row_mut(j).assign(&out.row(k));
            }
            groups.push(TokenGroup { rows, input });
        }
        (tokens, groups)
    }

    fn run_encoder<F: NdFloat>(&self, params: &[F], mut x: Array2<F>) -> (Array2<F>, Vec<BlockCache<F>>, LayerNormCache<F>) {
        let mut caches = Vec::with_capacity(self.ids.encoder.len());
        for blk in &self.ids.encoder {
            let (y, c) = block_forward(&self.layout, params, blk, self.config.heads, x);
            caches.push(c);
            x = y;
        }
        let (g, b) = self.ids.encoder_norm;
        let (out, norm) = layer_norm(x.view(), self.layout.vec(params, g), self.layout.vec(params, b));
        (out, caches, norm)
    }

    /// Encoder on `tokens + encodings` (both `(n_vis, W)`): blocks, then the
    /// final layer norm.
    pub fn encode<F: NdFloat>(&self, params: &[F], tokens: ArrayView2<'_, F>, encodings: ArrayView2<'_, F>) -> Result<Array2<F>> {
        if tokens.nrows() == 0 {
            return Err(Error::NoVisibleTokens);
        }
        if tokens.dim() != encodings.dim() || tokens.ncols() != self.config.width {
            return Err(Error::Shape(format!(
                "tokens {:?}, encodings {:?}, width {}",
                tokens.dim(),
                encodings.dim(),
                self.config.width
            )));
        }
        let x = &tokens + &encodings;
        check_finite(&x, "encoder input")?;
        let (out, _, _) = self.run_encoder(params, x);
        check_finite(&out, "latents")?;
        Ok(out)
    }

    fn run_decoder<F: NdFloat>(
        &self,
        params: &[F],
        latents: &Array2<F>,
        visible: &[usize],
        mask: &Mask,
        encodings: &Array2<F>,
    ) -> (Array2<F>, Vec<BlockCache<F>>, LayerNormCache<F>) {
        let l = &self.layout;
        let z = linear(latents.view(), l.mat(params, self.ids.decoder_embed.0), l.vec(params, self.ids.decoder_embed.1));
        let mut x = linear(
            encodings.view(),
            l.mat(params, self.ids.decoder_encoding.0),
            l.vec(params, self.ids.decoder_encoding.1),
        );
        let token = l.vec(params, self.ids.mask_token);
        for (i, &m) in mask.bits().iter().enumerate() {
            if m {
                x.row_mut(i).zip_mut_with(&token, |o, &v| *o += v);
            }
        }
        for (k, &i) in visible.iter().enumerate() {
            x.row_mut(i).zip_mut_with(&z.row(k), |o, &v| *o += v);
        }
        let mut caches = Vec::with_capacity(self.ids.decoder.len());
        for blk in &self.ids.decoder {
            let (y, c) = block_forward(l, params, blk, self.config.heads, x);
            caches.push(c);
            x = y;
        }
        let (g, b) = self.ids.decoder_norm;
        let (out, norm) = layer_norm(x.view(), l.vec(params, g), l.vec(params, b));
        (out, caches, norm)
    }

    fn apply_head<F: NdFloat>(&self, params: &[F], source: usize, hidden: ArrayView2<'_, F>) -> Array2<F> {
        let (w, b) = self.ids.heads[source];
        linear(hidden, self.layout.mat(params, w), self.layout.vec(params, b))
    }

    /// Decoder on encoder latents. `encodings` covers the full lattice and
    /// `source_ids` names the model source of each lattice source slot.
    /// Returns per source `(t, p, bands·256)` predictions for every slot.
    pub fn decode<F: NdFloat>(
        &self,
        params: &[F],
        latents: ArrayView2<'_, F>,
        mask: &Mask,
        encodings: ArrayView2<'_, F>,
        source_ids: &[usize],
    ) -> Result<Vec<Array3<F>>> {
        let (t, s, p) = mask.dims();
        if latents.nrows() != mask.visible_count() || latents.ncols() != self.config.width {
            return Err(Error::Shape(format!(
                "latents {:?} for {} visible slots of width {}",
                latents.dim(),
                mask.visible_count(),
                self.config.width
            )));
        }
        if encodings.dim() != (mask.len(), self.config.width) || source_ids.len() != s {
            return Err(Error::Shape(format!(
                "encodings {:?} / {} source ids for mask {:?}",
                encodings.dim(),
                source_ids.len(),
                mask.dims()
            )));
        }
        if let Some(&bad) = source_ids.iter().find(|&&id| id >= self.sources.len()) {
            return Err(Error::UnknownSource(format!("source id {bad}")));
        }
        let visible = mask.visible_indices();
        let (hidden, _, _) = self.run_decoder(params, &latents.to_owned(), &visible, mask, &encodings.to_owned());
        Ok(self.all_predictions(params, &hidden, (t, s, p), source_ids))
    }

    fn all_predictions<F: NdFloat>(&self, params: &[F], hidden: &Array2<F>, (t, s, p): (usize, usize, usize), source_ids: &[usize]) -> Vec<Array3<F>> {
        source_ids
            .iter()
            .enumerate()
            .map(|(si, &src)| {
                let rows: Vec<usize> = (0..t).flat_map(|ti| (0..p).map(move |pi| (ti * s + si) * p + pi)).collect();
                let pred = self.apply_head(params, src, hidden.select(Axis(0), &rows).view());
                let dim = pred.ncols();
                pred.into_shape_with_order((t, p, dim)).expect("row count t·p")
            })
            .collect()
    }

    fn trace<F: NdFloat>(&self, params: &[F], sample: &SampleView<'_>, mask: &Mask) -> Result<Trace<F>> {
        let (t, s, p) = self.check_sample(sample, mask)?;
        let ids: Vec<usize> = sample.sources.iter().map(|x| x.source).collect();
        let encodings = self.encodings(params, sample.timestamps, &ids)?;
        let visible = mask.visible_indices();
        if visible.is_empty() {
            return Err(Error::NoVisibleTokens);
        }
        let (mut x, groups) = self.embed_tokens(params, sample, &visible, s, p);
        x += &encodings.select(Axis(0), &visible);
        check_finite(&x, "encoder input")?;
        let (latents, encoder, encoder_norm) = self.run_encoder(params, x);
        let (hidden, decoder, decoder_norm) = self.run_decoder(params, &latents, &visible, mask, &encodings);
        Ok(Trace {
            dims: (t, s, p),
            encodings,
            visible,
            groups,
            encoder,
            encoder_norm,
            latents,
            decoder,
            decoder_norm,
            hidden,
        })
    }

    /// Masked loss of one sample; with `grads`, also accumulate its gradient.
    fn loss_impl<F: NdFloat>(&self, params: &[F], sample: &SampleView<'_>, mask: &Mask, grads: Option<&mut [F]>) -> Result<(F, SampleLoss)> {
        let tr = self.trace(params, sample, mask)?;
        let (t, s, p) = tr.dims;
        let masked_rows: Vec<Vec<usize>> = (0..s)
            .map(|si| {
                (0..t)
                    .flat_map(|ti| (0..p).map(move |pi| (ti * s + si) * p + pi))
                    .filter(|&i| mask.bits()[i])
                    .collect()
            })
            .collect();
        let active = masked_rows.iter().filter(|r| !r.is_empty()).count();
        if active == 0 {
            return Err(Error::NoMaskedPositions);
        }
        let mut total = F::zero();
        let mut per_source = Vec::with_capacity(s);
        let mut residuals = Vec::with_capacity(s);
        for (si, rows) in masked_rows.iter().enumerate() {
            if rows.is_empty() {
                per_source.push(None);
                residuals.push(None);
                continue;
            }
            let src = &sample.sources[si];
            let mut resid = self.apply_head(params, src.source, tr.hidden.select(Axis(0), rows).view());
            let mut target = Array2::<F>::zeros(resid.dim());
            for (k, &i) in rows.iter().enumerate() {
                let patch = src.patches.slice(s![i / (s * p), i % p, ..]);
                loss::patch_target_row(patch, self.config.norm_pix, target.row_mut(k));
            }
            resid -= &target;
            let mse = resid.iter().fold(F::zero(), |a, &r| a + r * r) / cast(resid.len() as f64);
            total += mse;
            per_source.push(Some(mse.to_f64().unwrap()));
            residuals.push(Some(resid));
        }
        let loss = total / cast(active as f64);
        if !loss.is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        let summary = SampleLoss { loss: loss.to_f64().unwrap(), per_source };
        if let Some(grads) = grads {
            let mut dhidden = Array2::zeros(tr.hidden.dim());
            for (si, resid) in residuals.into_iter().enumerate() {
                let Some(resid) = resid else { continue };
                let rows = &masked_rows[si];
                let scale: F = cast(2.0 / (active * resid.len()) as f64);
                let dpred = resid * scale;
                let h = tr.hidden.select(Axis(0), rows);
                let dh = linear_backward(&self.layout, params, grads, self.ids.heads[sample.sources[si].source], h.view(), dpred.view(), true)
                    .unwrap();
                for (k, &i) in rows.iter().enumerate() {
                    dhidden.row_mut(i).assign(&dh.row(k));
                }
            }
            self.backward(params, grads, &tr, sample, mask, dhidden);
        }
        Ok((loss, summary))
    }

    fn backward<F: NdFloat>(&self, params: &[F], grads: &mut [F], tr: &Trace<F>, sample: &SampleView<'_>, mask: &Mask, dhidden: Array2<F>) {
        let l = &self.layout;
        let heads = self.config.heads;
        let mut d = layer_norm_backward(l, params, grads, self.ids.decoder_norm, &tr.decoder_norm, dhidden.view());
        for (blk, cache) in self.ids.decoder.iter().zip(&tr.decoder).rev() {
            d = block_backward(l, params, grads, blk, heads, cache, d);
        }
        let mut dencodings = linear_backward(l, params, grads, self.ids.decoder_encoding, tr.encodings.view(), d.view(), true).unwrap();
        {
            let mut dtoken = l.vec_mut(grads, self.ids.mask_token);
            for (i, &m) in mask.bits().iter().enumerate() {
                if m {
                    dtoken.zip_mut_with(&d.row(i), |g, &v| *g += v);
                }
            }
        }
        let dz = d.select(Axis(0), &tr.visible);
        let dlat = linear_backward(l, params, grads, self.ids.decoder_embed, tr.latents.view(), dz.view(), true).unwrap();
        let mut dx = layer_norm_backward(l, params, grads, self.ids.encoder_norm, &tr.encoder_norm, dlat.view());
        for (blk, cache) in self.ids.encoder.iter().zip(&tr.encoder).rev() {
            dx = block_backward(l, params, grads, blk, heads, cache, dx);
        }
        for (group, src) in tr.groups.iter().zip(&sample.sources) {
            if group.rows.is_empty() {
                continue;
            }
            let dtok = dx.select(Axis(0), &group.rows);
            linear_backward(l, params, grads, self.ids.tokenizers[src.source], group.input.view(), dtok.view(), false);
        }
        for (k, &i) in tr.visible.iter().enumerate() {
            dencodings.row_mut(i).zip_mut_with(&dx.row(k), |o, &v| *o += v);
        }
        self.encoding_backward(grads, tr, sample, &dencodings);
    }

    fn encoding_backward<F: NdFloat>(&self, grads: &mut [F], tr: &Trace<F>, sample: &SampleView<'_>, dencodings: &Array2<F>) {
        let (t, s, p) = tr.dims;
        let d = self.config.pos_dim();
        let l = &self.layout;
        for ti in 0..t {
            let idx = encoding::time_index(&sample.timestamps[ti]).as_array();
            for si in 0..s {
                let base = (ti * s + si) * p;
                let block = dencodings.slice(s![base..base + p, d..]).sum_axis(Axis(0));
                let mut src_table = l.mat_mut(grads, self.ids.source_table);
                src_table
                    .row_mut(sample.sources[si].source)
                    .zip_mut_with(&block.slice(s![..SOURCE_DIM]), |g, &v| *g += v);
                for (k, &row) in idx.iter().enumerate() {
                    let off = SOURCE_DIM + k * TIME_COMPONENT_DIM;
                    l.mat_mut(grads, self.ids.time_tables[k])
                        .row_mut(row)
                        .zip_mut_with(&block.slice(s![off..off + TIME_COMPONENT_DIM]), |g, &v| *g += v);
                }
            }
        }
    }

    /// Masked reconstruction loss of one sample, averaged equally over the
    /// sources that have at least one masked slot.
    pub fn loss<F: NdFloat>(&self, params: &[F], sample: &SampleView<'_>, mask: &Mask) -> Result<SampleLoss> {
        self.loss_impl(params, sample, mask, None).map(|(_, s)| s)
    }

    /// Like [`MaeModel::loss`] but returns the loss in the model's float type.
    pub fn loss_value<F: NdFloat>(&self, params: &[F], sample: &SampleView<'_>, mask: &Mask) -> Result<F> {
        self.loss_impl(params, sample, mask, None).map(|(l, _)| l)
    }

    /// Loss of one sample, adding its gradient into `grads`.
    pub fn loss_and_grad<F: NdFloat>(&self, params: &[F], sample: &SampleView<'_>, mask: &Mask, grads: &mut [F]) -> Result<SampleLoss> {
        if grads.len() != self.layout.len() || params.len() != self.layout.len() {
            return Err(Error::Shape(format!(
                "{} params / {} grads for layout of {}",
                params.len(),
                grads.len(),
                self.layout.len()
            )));
        }
        self.loss_impl(params, sample, mask, Some(grads)).map(|(_, s)| s)
    }

    /// Predictions for every lattice slot, per sample source `(t, p, bands·256)`.
    pub fn reconstruct<F: NdFloat>(&self, params: &[F], sample: &SampleView<'_>, mask: &Mask) -> Result<Vec<Array3<F>>> {
        let tr = self.trace(params, sample, mask)?;
        let ids: Vec<usize> = sample.sources.iter().map(|x| x.source).collect();
        Ok(self.all_predictions(params, &tr.hidden, tr.dims, &ids))
    }

    /// Mean loss over a batch, each sample masked by `scheme` with a seed
    /// derived from `seed` and the sample position. Also returns the
    /// reconstructions.
    pub fn forward_loss<F: NdFloat>(
        &self,
        params: &[F],
        batch: &[SampleView<'_>],
        scheme: &crate::masking::MaskScheme,
        seed: u64,
    ) -> Result<(f64, Vec<Vec<Array3<F>>>)> {
        if batch.is_empty() {
            return Err(Error::Empty("batch"));
        }
        let mut total = 0.0;
        let mut recons = Vec::with_capacity(batch.len());
        for (i, sample) in batch.iter().enumerate() {
            let mask_seed = crate::rng::derive_key(key![seed, "forward_loss", i]);
            let mask = scheme.generate(sample.timestamps.len(), sample.sources.len(), NUM_PATCHES, mask_seed)?;
            total += self.loss(params, sample, &mask)?.loss;
            recons.push(self.reconstruct(params, sample, &mask)?);
        }
        Ok((total / batch.len() as f64, recons))
    }

    /// Multiply-add count of the encoder blocks on `n_visible` tokens.
    pub fn encoder_flops(&self, n_visible: usize) -> u64 {
        let w = self.config.width;
        self.config.encoder_depth as u64 * nn::block_flops(n_visible, w, w * self.config.mlp_ratio)
    }
}

/// Rebuild a `(bands, 224, 224)` image from `(196, bands·256)` predictions.
pub fn unpatchify(pred: ArrayView2<'_, f32>, bands: usize) -> Result<Array3<f32>> {
    if pred.nrows() != NUM_PATCHES {
        return Err(Error::Shape(format!("{} patches, expected {NUM_PATCHES}", pred.nrows())));
    }
    crate::tokenizer::unpatchify(pred, bands, PATCH_SIZE)
}
