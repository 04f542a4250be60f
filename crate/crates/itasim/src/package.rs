//! Frozen model packaging: a human-readable JSON manifest next to raw
//! binary weight blobs.
//!
//! The manifest carries everything needed to audit the integer datapath
//! without running it: model shape, the quadratic fit coefficients, every
//! junction scale, the integer kernel constants (q1..q8) derived from them,
//! and the dyadic multiplier frozen at each requantization junction. Blobs
//! hold only dense integer data: int8 matrices row-major and int32 biases,
//! both little-endian, each checksummed in the manifest.
//!
//! Loading re-derives the kernel constants and dyadic multipliers from the
//! scales and cross-checks them against the stored copies, so a package
//! whose constants were edited by hand is rejected rather than silently
//! producing different arithmetic.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::blocks::{
    ln_out_scale, Bias, EncoderWeights, HeadWeights, KernelFits, LayerWeights, ModelConfig,
    ScaleMode,
};
use crate::error::{Error, Result};
use crate::kernels::{ExpConsts, GeluConsts};
use crate::quant::{auto_precision, dyadic_fit, DyadicScale, QMat8, Scale};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_DIR: &str = "blobs";
pub const PACKAGE_FORMAT: &str = "int8-encoder-package";
pub const PACKAGE_VERSION: u32 = 1;

/// Hex SHA-256 of a byte string; the checksum used throughout the package.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let out = h.finalize();
    let mut s = String::with_capacity(64);
    for b in out {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// One binary file under `blobs/`: element type, total byte length, and
/// checksum. Shapes live on the referencing tensor entry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobEntry {
    pub dtype: String,
    pub bytes: usize,
    pub sha256: String,
}

/// Reference to an int8 weight matrix blob, with its shape and scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatRef {
    pub blob: String,
    pub rows: usize,
    pub cols: usize,
    pub scale: Scale,
}

/// Reference to an int32 bias blob. `scale` is the accumulator scale the
/// bias is added on; `align` is the dyadic multiplier that moves the stored
/// integers onto that scale (identity when the bias was frozen directly on
/// the accumulator scale).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BiasRef {
    pub blob: String,
    pub len: usize,
    pub scale: Scale,
    pub align: DyadicScale,
}

/// One attention head's manifest entry: tensor references, junction scales,
/// and the integer exponential constants derived from them (q1..q3 plus the
/// softmax reciprocal q4).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadManifest {
    pub wq: MatRef,
    pub bq: BiasRef,
    pub wk: MatRef,
    pub bk: BiasRef,
    pub wv: MatRef,
    pub bv: BiasRef,
    pub s_q: Scale,
    pub s_k: Scale,
    pub s_v: Scale,
    pub s_probs: Scale,
    pub q1: i32,
    pub q2: i32,
    pub q3: i32,
    pub q4: i32,
}

/// One encoder layer's manifest entry: tensor references, junction scales,
/// layernorm affine vectors (exact, hence kept in the manifest rather than
/// quantized into a blob), and the integer error-function constants derived
/// from the activation scale (q6..q8 plus the clip bound).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerManifest {
    pub heads: Vec<HeadManifest>,
    pub wo: MatRef,
    pub bo: BiasRef,
    pub w1: MatRef,
    pub b1: BiasRef,
    pub w2: MatRef,
    pub b2: BiasRef,
    pub ln1_gamma: Vec<f64>,
    pub ln1_beta: Vec<f64>,
    pub ln2_gamma: Vec<f64>,
    pub ln2_beta: Vec<f64>,
    pub s_in: Scale,
    pub s_concat: Scale,
    pub s_res1: Scale,
    pub s_ffn_in: Scale,
    pub s_gelu_in: Scale,
    pub s_ffn_mid: Scale,
    pub s_res2: Scale,
    pub s_out: Scale,
    pub q6: i32,
    pub q7: i32,
    pub q8: i32,
    pub gelu_clip: i32,
}

/// The package manifest: structured text describing every tensor, scale,
/// and derived integer constant, plus checksums of the binary blobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    pub fits: KernelFits,
    /// Arithmetic right shift applied to raw attention scores when the
    /// score scaling mode is the sqrt(head-dim) shift.
    pub score_shift: u8,
    /// Integer reciprocal of the layernorm output scale (q5); shared by
    /// both normalization blocks of every layer.
    pub q5_norm_recip: i32,
    pub layers: Vec<LayerManifest>,
    /// Frozen dyadic multiplier at every requantization junction, keyed by
    /// junction name ("l0.h1.q", "l0.res1.y", ...). Residual joins have an
    /// `.x` (skip path) and `.y` (block output) side sharing one shift.
    pub dyadics: BTreeMap<String, DyadicScale>,
    pub blobs: BTreeMap<String, BlobEntry>,
}

/// A frozen model as stored on disk: the manifest plus the raw blob bytes.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelPackage {
    pub manifest: Manifest,
    pub blobs: BTreeMap<String, Vec<u8>>,
}

fn i8_bytes(data: &[i8]) -> Vec<u8> {
    data.iter().map(|&v| v as u8).collect()
}

fn i32_bytes(data: &[i32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(data.len() * 4);
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn i32_from_bytes(bytes: &[u8]) -> Vec<i32> {
    bytes
        .chunks_exact(4)
        .map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

/// The dyadic multipliers the datapath will derive at run time, keyed by
/// junction name. Ratios are formed with the same operation order the
/// runtime uses so the frozen values match bit for bit.
pub fn frozen_dyadics(w: &EncoderWeights) -> Result<BTreeMap<String, DyadicScale>> {
    let mut map = BTreeMap::new();
    let mut put = |key: String, ratio: f64, c: u8| -> Result<()> {
        map.insert(key, dyadic_fit(ratio, c)?);
        Ok(())
    };
    let requant = |ratio: f64| (ratio, auto_precision(ratio));
    if w.config.scale_mode == ScaleMode::ModelDim {
        let r = 1.0 / w.config.d as f64;
        let (r, c) = requant(r);
        put("scores".into(), r, c)?;
    }
    let ln_out = ln_out_scale().value();
    for (li, lw) in w.layers.iter().enumerate() {
        for (hi, hw) in lw.heads.iter().enumerate() {
            for (name, wm, s) in [
                ("q", &hw.wq, hw.s_q),
                ("k", &hw.wk, hw.s_k),
                ("v", &hw.wv, hw.s_v),
            ] {
                let (r, c) = requant(lw.s_in.value() * wm.scale.value() / s.value());
                put(format!("l{li}.h{hi}.{name}"), r, c)?;
            }
            let (r, c) = requant(hw.s_probs.value() * hw.s_v.value() / lw.s_concat.value());
            put(format!("l{li}.h{hi}.concat"), r, c)?;
        }
        // Residual joins rescale both sides with one shared shift, the
        // smaller of the two auto-selected precisions.
        let rx1 = lw.s_in.value() / lw.s_res1.value();
        let ry1 = lw.s_concat.value() * lw.wo.scale.value() / lw.s_res1.value();
        let c1 = auto_precision(rx1).min(auto_precision(ry1));
        put(format!("l{li}.res1.x"), rx1, c1)?;
        put(format!("l{li}.res1.y"), ry1, c1)?;

        let (r, c) = requant(ln_out / lw.s_ffn_in.value());
        put(format!("l{li}.ffn_in"), r, c)?;
        let (r, c) = requant(lw.s_ffn_in.value() * lw.w1.scale.value() / lw.s_gelu_in.value());
        put(format!("l{li}.gelu_in"), r, c)?;
        let gc = GeluConsts::new(&w.fits.erf, lw.s_gelu_in)?;
        let (r, c) = requant(gc.s_out().value() / lw.s_ffn_mid.value());
        put(format!("l{li}.ffn_mid"), r, c)?;

        let rx2 = lw.s_ffn_in.value() / lw.s_res2.value();
        let ry2 = lw.s_ffn_mid.value() * lw.w2.scale.value() / lw.s_res2.value();
        let c2 = auto_precision(rx2).min(auto_precision(ry2));
        put(format!("l{li}.res2.x"), rx2, c2)?;
        put(format!("l{li}.res2.y"), ry2, c2)?;

        let (r, c) = requant(ln_out / lw.s_out.value());
        put(format!("l{li}.out"), r, c)?;
    }
    Ok(map)
}

fn softmax_recip(s_probs: Scale) -> i32 {
    (1.0 / s_probs.value()).round() as i32
}

impl ModelPackage {
    /// Freeze a validated model into its on-disk image.
    pub fn from_weights(w: &EncoderWeights) -> Result<Self> {
        w.validate()?;
        let mut blobs = BTreeMap::new();
        let mut entries = BTreeMap::new();
        let mut layers = Vec::with_capacity(w.layers.len());
        for (li, lw) in w.layers.iter().enumerate() {
            let mut heads = Vec::with_capacity(lw.heads.len());
            for (hi, hw) in lw.heads.iter().enumerate() {
                let exp = ExpConsts::new(&w.fits.exp, hw.s_q.times(hw.s_k)?)?;
                let wq = mat_ref(&hw.wq, format!("l{li}.h{hi}.wq"), &mut blobs, &mut entries);
                let wk = mat_ref(&hw.wk, format!("l{li}.h{hi}.wk"), &mut blobs, &mut entries);
                let wv = mat_ref(&hw.wv, format!("l{li}.h{hi}.wv"), &mut blobs, &mut entries);
                heads.push(HeadManifest {
                    bq: bias_ref(
                        &hw.bq,
                        lw.s_in.times(hw.wq.scale)?,
                        format!("l{li}.h{hi}.bq"),
                        &mut blobs,
                        &mut entries,
                    ),
                    bk: bias_ref(
                        &hw.bk,
                        lw.s_in.times(hw.wk.scale)?,
                        format!("l{li}.h{hi}.bk"),
                        &mut blobs,
                        &mut entries,
                    ),
                    bv: bias_ref(
                        &hw.bv,
                        lw.s_in.times(hw.wv.scale)?,
                        format!("l{li}.h{hi}.bv"),
                        &mut blobs,
                        &mut entries,
                    ),
                    wq,
                    wk,
                    wv,
                    s_q: hw.s_q,
                    s_k: hw.s_k,
                    s_v: hw.s_v,
                    s_probs: hw.s_probs,
                    q1: exp.q1(),
                    q2: exp.q2(),
                    q3: exp.q3(),
                    q4: softmax_recip(hw.s_probs),
                });
            }
            let gc = GeluConsts::new(&w.fits.erf, lw.s_gelu_in)?;
            let wo = mat_ref(&lw.wo, format!("l{li}.wo"), &mut blobs, &mut entries);
            let w1 = mat_ref(&lw.w1, format!("l{li}.w1"), &mut blobs, &mut entries);
            let w2 = mat_ref(&lw.w2, format!("l{li}.w2"), &mut blobs, &mut entries);
            layers.push(LayerManifest {
                heads,
                bo: bias_ref(
                    &lw.bo,
                    lw.s_concat.times(lw.wo.scale)?,
                    format!("l{li}.bo"),
                    &mut blobs,
                    &mut entries,
                ),
                b1: bias_ref(
                    &lw.b1,
                    lw.s_ffn_in.times(lw.w1.scale)?,
                    format!("l{li}.b1"),
                    &mut blobs,
                    &mut entries,
                ),
                b2: bias_ref(
                    &lw.b2,
                    lw.s_ffn_mid.times(lw.w2.scale)?,
                    format!("l{li}.b2"),
                    &mut blobs,
                    &mut entries,
                ),
                wo,
                w1,
                w2,
                ln1_gamma: lw.ln1_gamma.clone(),
                ln1_beta: lw.ln1_beta.clone(),
                ln2_gamma: lw.ln2_gamma.clone(),
                ln2_beta: lw.ln2_beta.clone(),
                s_in: lw.s_in,
                s_concat: lw.s_concat,
                s_res1: lw.s_res1,
                s_ffn_in: lw.s_ffn_in,
                s_gelu_in: lw.s_gelu_in,
                s_ffn_mid: lw.s_ffn_mid,
                s_res2: lw.s_res2,
                s_out: lw.s_out,
                q6: gc.q6(),
                q7: gc.q7(),
                q8: gc.q8(),
                gelu_clip: gc.clip_bound(),
            });
        }
        let manifest = Manifest {
            format: PACKAGE_FORMAT.into(),
            version: PACKAGE_VERSION,
            config: w.config,
            fits: w.fits,
            score_shift: ScaleMode::shift_amount(w.config.d_h()),
            q5_norm_recip: (1.0 / ln_out_scale().value()).round() as i32,
            layers,
            dyadics: frozen_dyadics(w)?,
            blobs: entries,
        };
        Ok(ModelPackage { manifest, blobs })
    }

    /// Rebuild runnable weights, verifying checksums and every derived
    /// constant along the way.
    pub fn to_weights(&self) -> Result<EncoderWeights> {
        self.verify_blobs()?;
        let m = &self.manifest;
        if m.format != PACKAGE_FORMAT {
            return Err(Error::package(format!(
                "unrecognized package format {:?}",
                m.format
            )));
        }
        if m.version != PACKAGE_VERSION {
            return Err(Error::package(format!(
                "unsupported package version {} (expected {PACKAGE_VERSION})",
                m.version
            )));
        }
        let mut layers = Vec::with_capacity(m.layers.len());
        for lm in &m.layers {
            let mut heads = Vec::with_capacity(lm.heads.len());
            for hm in &lm.heads {
                heads.push(HeadWeights {
                    wq: self.mat(&hm.wq)?,
                    bq: self.bias(&hm.bq)?,
                    wk: self.mat(&hm.wk)?,
                    bk: self.bias(&hm.bk)?,
                    wv: self.mat(&hm.wv)?,
                    bv: self.bias(&hm.bv)?,
                    s_q: hm.s_q,
                    s_k: hm.s_k,
                    s_v: hm.s_v,
                    s_probs: hm.s_probs,
                });
            }
            layers.push(LayerWeights {
                heads,
                wo: self.mat(&lm.wo)?,
                bo: self.bias(&lm.bo)?,
                w1: self.mat(&lm.w1)?,
                b1: self.bias(&lm.b1)?,
                w2: self.mat(&lm.w2)?,
                b2: self.bias(&lm.b2)?,
                ln1_gamma: lm.ln1_gamma.clone(),
                ln1_beta: lm.ln1_beta.clone(),
                ln2_gamma: lm.ln2_gamma.clone(),
                ln2_beta: lm.ln2_beta.clone(),
                s_in: lm.s_in,
                s_concat: lm.s_concat,
                s_res1: lm.s_res1,
                s_ffn_in: lm.s_ffn_in,
                s_gelu_in: lm.s_gelu_in,
                s_ffn_mid: lm.s_ffn_mid,
                s_res2: lm.s_res2,
                s_out: lm.s_out,
            });
        }
        let w = EncoderWeights {
            config: m.config,
            fits: m.fits,
            layers,
        };
        w.validate()?;
        self.verify_constants(&w)?;
        Ok(w)
    }

    /// Check every manifest blob entry against the actual bytes and reject
    /// blobs the manifest does not mention.
    fn verify_blobs(&self) -> Result<()> {
        for (key, entry) in &self.manifest.blobs {
            let bytes = self.blobs.get(key).ok_or_else(|| {
                Error::package(format!("manifest references missing blob {key:?}"))
            })?;
            if bytes.len() != entry.bytes {
                return Err(Error::package(format!(
                    "blob {key:?} is {} bytes, manifest says {}",
                    bytes.len(),
                    entry.bytes
                )));
            }
            let got = sha256_hex(bytes);
            if got != entry.sha256 {
                return Err(Error::package(format!(
                    "checksum mismatch for blob {key:?}: manifest {} actual {got}",
                    entry.sha256
                )));
            }
        }
        for key in self.blobs.keys() {
            if !self.manifest.blobs.contains_key(key) {
                return Err(Error::package(format!(
                    "blob {key:?} is not referenced by the manifest"
                )));
            }
        }
        Ok(())
    }

    /// Re-derive every integer constant from the scales and fits and compare
    /// with the stored copies.
    fn verify_constants(&self, w: &EncoderWeights) -> Result<()> {
        let m = &self.manifest;
        let shift = ScaleMode::shift_amount(w.config.d_h());
        if m.score_shift != shift {
            return Err(Error::package(format!(
                "score shift {} does not match the derived {shift}",
                m.score_shift
            )));
        }
        let q5 = (1.0 / ln_out_scale().value()).round() as i32;
        if m.q5_norm_recip != q5 {
            return Err(Error::package(format!(
                "normalization reciprocal {} does not match the derived {q5}",
                m.q5_norm_recip
            )));
        }
        for (li, (lm, lw)) in m.layers.iter().zip(&w.layers).enumerate() {
            for (hi, (hm, hw)) in lm.heads.iter().zip(&lw.heads).enumerate() {
                let exp = ExpConsts::new(&w.fits.exp, hw.s_q.times(hw.s_k)?)?;
                let got = (exp.q1(), exp.q2(), exp.q3(), softmax_recip(hw.s_probs));
                let stored = (hm.q1, hm.q2, hm.q3, hm.q4);
                if got != stored {
                    return Err(Error::package(format!(
                        "layer {li} head {hi}: stored exponential constants {stored:?} \
                         do not match the derived {got:?}"
                    )));
                }
                for (name, acc, stored) in [
                    ("bq", lw.s_in.times(hw.wq.scale)?, hm.bq.scale),
                    ("bk", lw.s_in.times(hw.wk.scale)?, hm.bk.scale),
                    ("bv", lw.s_in.times(hw.wv.scale)?, hm.bv.scale),
                ] {
                    if acc != stored {
                        return Err(Error::package(format!(
                            "layer {li} head {hi}: {name} accumulator scale {} does not \
                             match the derived {}",
                            stored.value(),
                            acc.value()
                        )));
                    }
                }
            }
            let gc = GeluConsts::new(&w.fits.erf, lw.s_gelu_in)?;
            let got = (gc.q6(), gc.q7(), gc.q8(), gc.clip_bound());
            let stored = (lm.q6, lm.q7, lm.q8, lm.gelu_clip);
            if got != stored {
                return Err(Error::package(format!(
                    "layer {li}: stored error-function constants {stored:?} do not \
                     match the derived {got:?}"
                )));
            }
            for (name, acc, stored) in [
                ("bo", lw.s_concat.times(lw.wo.scale)?, lm.bo.scale),
                ("b1", lw.s_ffn_in.times(lw.w1.scale)?, lm.b1.scale),
                ("b2", lw.s_ffn_mid.times(lw.w2.scale)?, lm.b2.scale),
            ] {
                if acc != stored {
                    return Err(Error::package(format!(
                        "layer {li}: {name} accumulator scale {} does not match the \
                         derived {}",
                        stored.value(),
                        acc.value()
                    )));
                }
            }
        }
        let derived = frozen_dyadics(w)?;
        if m.dyadics != derived {
            for (key, d) in &derived {
                match m.dyadics.get(key) {
                    Some(stored) if stored == d => {}
                    Some(stored) => {
                        return Err(Error::package(format!(
                            "dyadic {key:?} stored as {stored:?}, derived {d:?}"
                        )))
                    }
                    None => {
                        return Err(Error::package(format!(
                            "dyadic map is missing junction {key:?}"
                        )))
                    }
                }
            }
            return Err(Error::package(
                "dyadic map lists junctions the model does not have",
            ));
        }
        Ok(())
    }

    fn mat(&self, r: &MatRef) -> Result<QMat8> {
        let entry = self.manifest.blobs.get(&r.blob).ok_or_else(|| {
            Error::package(format!("tensor references unlisted blob {:?}", r.blob))
        })?;
        if entry.dtype != "i8" {
            return Err(Error::package(format!(
                "blob {:?} is dtype {:?}, expected i8",
                r.blob, entry.dtype
            )));
        }
        let bytes = &self.blobs[&r.blob];
        if bytes.len() != r.rows * r.cols {
            return Err(Error::package(format!(
                "blob {:?} holds {} bytes for a {}x{} matrix",
                r.blob,
                bytes.len(),
                r.rows,
                r.cols
            )));
        }
        let data: Vec<i8> = bytes.iter().map(|&b| b as i8).collect();
        QMat8::new(r.rows, r.cols, data, r.scale)
    }

    fn bias(&self, r: &BiasRef) -> Result<Bias> {
        let entry = self.manifest.blobs.get(&r.blob).ok_or_else(|| {
            Error::package(format!("bias references unlisted blob {:?}", r.blob))
        })?;
        if entry.dtype != "i32" {
            return Err(Error::package(format!(
                "blob {:?} is dtype {:?}, expected i32",
                r.blob, entry.dtype
            )));
        }
        let bytes = &self.blobs[&r.blob];
        if bytes.len() != r.len * 4 {
            return Err(Error::package(format!(
                "blob {:?} holds {} bytes for a length-{} bias",
                r.blob,
                bytes.len(),
                r.len
            )));
        }
        Ok(Bias {
            q: i32_from_bytes(bytes),
            align: r.align,
        })
    }

    /// Write `manifest.json` and the `blobs/` directory. The blob directory
    /// is owned by the package: any previous contents are replaced.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let blob_dir = dir.join(BLOB_DIR);
        if blob_dir.exists() {
            fs::remove_dir_all(&blob_dir)?;
        }
        fs::create_dir(&blob_dir)?;
        let mut manifest = serde_json::to_string_pretty(&self.manifest)?;
        manifest.push('\n');
        fs::write(dir.join(MANIFEST_FILE), manifest)?;
        for (key, bytes) in &self.blobs {
            fs::write(blob_dir.join(format!("{key}.bin")), bytes)?;
        }
        Ok(())
    }

    /// Read a package directory and verify checksums, derived constants,
    /// and that no stray blob files are present.
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join(MANIFEST_FILE);
        let manifest_text = fs::read_to_string(&manifest_path).map_err(|e| {
            Error::package(format!("cannot read {}: {e}", manifest_path.display()))
        })?;
        let manifest: Manifest = serde_json::from_str(&manifest_text)?;
        let blob_dir = dir.join(BLOB_DIR);
        let mut blobs = BTreeMap::new();
        for key in manifest.blobs.keys() {
            let path = blob_dir.join(format!("{key}.bin"));
            blobs.insert(
                key.clone(),
                fs::read(&path)
                    .map_err(|e| Error::package(format!("cannot read {}: {e}", path.display())))?,
            );
        }
        let mut on_disk = 0usize;
        for entry in fs::read_dir(&blob_dir)? {
            let name = entry?.file_name();
            let name = name.to_string_lossy().into_owned();
            let key = name.strip_suffix(".bin").unwrap_or(&name);
            if !blobs.contains_key(key) {
                return Err(Error::package(format!(
                    "unexpected file {name:?} in the blob directory"
                )));
            }
            on_disk += 1;
        }
        debug_assert_eq!(on_disk, blobs.len());
        let pkg = ModelPackage { manifest, blobs };
        // Surface corruption at load time, not first use.
        pkg.to_weights()?;
        Ok(pkg)
    }
}

fn mat_ref(
    m: &QMat8,
    key: String,
    blobs: &mut BTreeMap<String, Vec<u8>>,
    entries: &mut BTreeMap<String, BlobEntry>,
) -> MatRef {
    let bytes = i8_bytes(m.data());
    entries.insert(
        key.clone(),
        BlobEntry {
            dtype: "i8".into(),
            bytes: bytes.len(),
            sha256: sha256_hex(&bytes),
        },
    );
    blobs.insert(key.clone(), bytes);
    MatRef {
        blob: key,
        rows: m.rows(),
        cols: m.cols(),
        scale: m.scale,
    }
}

fn bias_ref(
    b: &Bias,
    acc_scale: Scale,
    key: String,
    blobs: &mut BTreeMap<String, Vec<u8>>,
    entries: &mut BTreeMap<String, BlobEntry>,
) -> BiasRef {
    let bytes = i32_bytes(&b.q);
    entries.insert(
        key.clone(),
        BlobEntry {
            dtype: "i32".into(),
            bytes: bytes.len(),
            sha256: sha256_hex(&bytes),
        },
    );
    blobs.insert(key.clone(), bytes);
    BiasRef {
        blob: key,
        len: b.q.len(),
        scale: acc_scale,
        align: b.align,
    }
}
