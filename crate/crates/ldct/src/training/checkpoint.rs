//! Checkpointing: every trainable tensor, both optimizers, the Monte-Carlo
//! RNG stream, and the experiment configuration in one JSON container with
//! base64-encoded little-endian `f32` payloads. Round-trips are bit-exact.

use super::config::ExperimentConfig;
use super::opt::Adam;
use crate::model::ReconModel;
use crate::rda::Discriminator;
use crate::{Error, Result};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use ndarray::{ArrayD, IxDyn};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

/// Current checkpoint schema version.
pub const CHECKPOINT_VERSION: u32 = 1;

/// One tensor: shape plus base64 of the row-major little-endian f32 bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorData {
    pub shape: Vec<usize>,
    pub data: String,
}

impl TensorData {
    pub fn encode(a: &ArrayD<f32>) -> Self {
        let mut bytes = Vec::with_capacity(a.len() * 4);
        for &v in a.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        TensorData {
            shape: a.shape().to_vec(),
            data: B64.encode(bytes),
        }
    }

    pub fn decode(&self) -> Result<ArrayD<f32>> {
        let bytes = B64
            .decode(&self.data)
            .map_err(|e| Error::Checkpoint(format!("bad tensor payload: {e}")))?;
        let n: usize = self.shape.iter().product();
        if bytes.len() != n * 4 {
            return Err(Error::Checkpoint(format!(
                "tensor payload holds {} bytes, shape {:?} needs {}",
                bytes.len(),
                self.shape,
                n * 4
            )));
        }
        let mut a = ArrayD::zeros(IxDyn(&self.shape));
        for (i, v) in a.iter_mut().enumerate() {
            *v = f32::from_le_bytes(bytes[i * 4..i * 4 + 4].try_into().unwrap());
        }
        Ok(a)
    }
}

/// Serialized Adam state: step counter and both moment buffers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<TensorData>,
    pub v: Vec<TensorData>,
}

impl AdamState {
    pub fn capture(opt: &Adam<f32>) -> Self {
        AdamState {
            step: opt.step_count,
            m: opt.m.iter().map(TensorData::encode).collect(),
            v: opt.v.iter().map(TensorData::encode).collect(),
        }
    }

    pub fn restore_into(&self, opt: &mut Adam<f32>) -> Result<()> {
        opt.step_count = self.step;
        opt.m = self.m.iter().map(TensorData::decode).collect::<Result<_>>()?;
        opt.v = self.v.iter().map(TensorData::decode).collect::<Result<_>>()?;
        if opt.m.len() != opt.v.len() {
            return Err(Error::Checkpoint(
                "optimizer moment buffers have mismatched lengths".into(),
            ));
        }
        Ok(())
    }
}

/// Complete training state at an epoch boundary.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    /// Number of completed epochs.
    pub epoch: usize,
    pub config: ExperimentConfig,
    pub model: BTreeMap<String, TensorData>,
    pub disc: BTreeMap<String, TensorData>,
    pub opt_model: AdamState,
    pub opt_disc: AdamState,
    /// The Monte-Carlo weight-sampling stream, mid-run.
    pub rng_mc: ChaCha20Rng,
    /// Best validation loss so far; `None` before any epoch has validated
    /// (JSON cannot carry the `+inf` sentinel).
    pub best_val: Option<f64>,
    pub best_epoch: usize,
    pub epochs_since_improve: usize,
}

/// Captures every tensor of the reconstruction model (posterior means and
/// widths, deterministic layers, and the frozen priors) under stable names.
pub fn model_state(model: &ReconModel<f32>) -> BTreeMap<String, TensorData> {
    let mut map = BTreeMap::new();
    let mut put = |key: String, a: &ArrayD<f32>| {
        map.insert(key, TensorData::encode(a));
    };
    for (i, layer) in model.enc.iter().enumerate() {
        put(format!("enc.{i}.w"), &layer.w);
        put(format!("enc.{i}.b"), &layer.b);
    }
    for (i, layer) in model.dec.iter().enumerate() {
        put(format!("dec.{i}.w"), &layer.w);
        put(format!("dec.{i}.b"), &layer.b);
    }
    for (prefix, bayes) in [("enc_bayes", &model.enc_bayes), ("dec_bayes", &model.dec_bayes)] {
        put(format!("{prefix}.w.mu"), &bayes.w.mu);
        put(format!("{prefix}.w.raw"), &bayes.w.raw_sigma);
        put(format!("{prefix}.b.mu"), &bayes.b.mu);
        put(format!("{prefix}.b.raw"), &bayes.b.raw_sigma);
        put(format!("{prefix}.w_prior.mu"), &bayes.w_prior.mu);
        put(format!("{prefix}.w_prior.sigma"), &bayes.w_prior.sigma);
        put(format!("{prefix}.b_prior.mu"), &bayes.b_prior.mu);
        put(format!("{prefix}.b_prior.sigma"), &bayes.b_prior.sigma);
    }
    map
}

fn take_tensor(
    map: &BTreeMap<String, TensorData>,
    key: &str,
    expect_shape: &[usize],
) -> Result<ArrayD<f32>> {
    let t = map
        .get(key)
        .ok_or_else(|| Error::Checkpoint(format!("missing tensor {key}")))?;
    let a = t.decode()?;
    if a.shape() != expect_shape {
        return Err(Error::Checkpoint(format!(
            "tensor {key}: shape {:?} does not match model {:?}",
            a.shape(),
            expect_shape
        )));
    }
    Ok(a)
}

/// Restores model tensors from a state map. The model must already have the
/// right architecture; shapes are checked and unknown keys rejected.
pub fn restore_model(model: &mut ReconModel<f32>, map: &BTreeMap<String, TensorData>) -> Result<()> {
    let expected = model_state(model).len();
    if map.len() != expected {
        return Err(Error::Checkpoint(format!(
            "model state holds {} tensors, architecture needs {expected}",
            map.len()
        )));
    }
    for (i, layer) in model.enc.iter_mut().enumerate() {
        layer.w = take_tensor(map, &format!("enc.{i}.w"), layer.w.shape())?;
        layer.b = take_tensor(map, &format!("enc.{i}.b"), layer.b.shape())?;
    }
    for (i, layer) in model.dec.iter_mut().enumerate() {
        layer.w = take_tensor(map, &format!("dec.{i}.w"), layer.w.shape())?;
        layer.b = take_tensor(map, &format!("dec.{i}.b"), layer.b.shape())?;
    }
    for (prefix, bayes) in [
        ("enc_bayes", &mut model.enc_bayes),
        ("dec_bayes", &mut model.dec_bayes),
    ] {
        bayes.w.mu = take_tensor(map, &format!("{prefix}.w.mu"), bayes.w.mu.shape())?;
        bayes.w.raw_sigma =
            take_tensor(map, &format!("{prefix}.w.raw"), bayes.w.raw_sigma.shape())?;
        bayes.b.mu = take_tensor(map, &format!("{prefix}.b.mu"), bayes.b.mu.shape())?;
        bayes.b.raw_sigma =
            take_tensor(map, &format!("{prefix}.b.raw"), bayes.b.raw_sigma.shape())?;
        bayes.w_prior.mu =
            take_tensor(map, &format!("{prefix}.w_prior.mu"), bayes.w_prior.mu.shape())?;
        bayes.w_prior.sigma = take_tensor(
            map,
            &format!("{prefix}.w_prior.sigma"),
            bayes.w_prior.sigma.shape(),
        )?;
        bayes.b_prior.mu =
            take_tensor(map, &format!("{prefix}.b_prior.mu"), bayes.b_prior.mu.shape())?;
        bayes.b_prior.sigma = take_tensor(
            map,
            &format!("{prefix}.b_prior.sigma"),
            bayes.b_prior.sigma.shape(),
        )?;
    }
    Ok(())
}

/// Captures discriminator tensors under stable names.
pub fn disc_state(disc: &Discriminator<f32>) -> BTreeMap<String, TensorData> {
    let mut map = BTreeMap::new();
    for (i, layer) in disc.layers.iter().enumerate() {
        map.insert(format!("layer.{i}.w"), TensorData::encode(&layer.w));
        map.insert(format!("layer.{i}.b"), TensorData::encode(&layer.b));
    }
    map
}

/// Restores discriminator tensors, checking counts and shapes.
pub fn restore_disc(disc: &mut Discriminator<f32>, map: &BTreeMap<String, TensorData>) -> Result<()> {
    if map.len() != disc.layers.len() * 2 {
        return Err(Error::Checkpoint(format!(
            "discriminator state holds {} tensors, architecture needs {}",
            map.len(),
            disc.layers.len() * 2
        )));
    }
    for (i, layer) in disc.layers.iter_mut().enumerate() {
        layer.w = take_tensor(map, &format!("layer.{i}.w"), layer.w.shape())?;
        layer.b = take_tensor(map, &format!("layer.{i}.b"), layer.b.shape())?;
    }
    Ok(())
}

/// Writes a checkpoint as pretty JSON.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let json = serde_json::to_string_pretty(ckpt).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    std::fs::write(path, json).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads and version-checks a checkpoint.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let json = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let ckpt: Checkpoint = serde_json::from_str(&json).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    if ckpt.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {} in {}",
            ckpt.version,
            path.display()
        )));
    }
    Ok(ckpt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive;
    use rand::{Rng, SeedableRng};

    fn assert_bits_eq(a: &ArrayD<f32>, b: &ArrayD<f32>, what: &str) {
        assert_eq!(a.shape(), b.shape(), "{what} shape");
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.to_bits(), y.to_bits(), "{what} bits");
        }
    }

    fn make_state() -> (ReconModel<f32>, Discriminator<f32>, Adam<f32>, Adam<f32>) {
        let model = ReconModel::<f32>::new(4, 0.1, 5).unwrap();
        let disc = Discriminator::new(4, 6).unwrap();
        let mut opt_m = Adam::new(1e-4, 0.9, 0.999, 1e-8);
        let mut opt_d = Adam::new(1e-4, 0.9, 0.999, 1e-8);
        // Push a couple of noisy steps so moments are non-trivial.
        let mut rng = derive(7, "ckpt-steps", 0);
        for _ in 0..3 {
            let mut m = model.clone();
            let mut params = m.flat_params_mut();
            let grads: Vec<Option<ArrayD<f32>>> = params
                .iter()
                .map(|p| {
                    Some(ArrayD::from_shape_fn(p.raw_dim(), |_| {
                        rng.gen_range(-0.1f32..0.1)
                    }))
                })
                .collect();
            opt_m.step(&mut params, &grads).unwrap();
            let mut d = disc.clone();
            let mut dp = d.flat_params_mut();
            let dg: Vec<Option<ArrayD<f32>>> = dp
                .iter()
                .map(|p| {
                    Some(ArrayD::from_shape_fn(p.raw_dim(), |_| {
                        rng.gen_range(-0.1f32..0.1)
                    }))
                })
                .collect();
            opt_d.step(&mut dp, &dg).unwrap();
        }
        (model, disc, opt_m, opt_d)
    }

    #[test]
    fn tensor_roundtrip_bit_exact() {
        let mut rng = derive(8, "ckpt-tensor", 0);
        let a: ArrayD<f32> =
            ArrayD::from_shape_fn(IxDyn(&[3, 2, 4]), |_| rng.gen_range(-10.0f32..10.0));
        let t = TensorData::encode(&a);
        assert_bits_eq(&a, &t.decode().unwrap(), "roundtrip");
        // Corrupt payload length.
        let mut bad = t.clone();
        bad.shape = vec![3, 2, 5];
        assert!(bad.decode().is_err());
        let mut bad = t;
        bad.data = "!!!not base64!!!".into();
        assert!(bad.decode().is_err());
    }

    #[test]
    fn full_checkpoint_roundtrip() {
        let (model, disc, opt_m, opt_d) = make_state();
        let mut rng_mc = ChaCha20Rng::seed_from_u64(99);
        let _: f64 = rng_mc.gen(); // advance so mid-stream state is saved
        let ckpt = Checkpoint {
            version: CHECKPOINT_VERSION,
            epoch: 3,
            config: ExperimentConfig::smoke(),
            model: model_state(&model),
            disc: disc_state(&disc),
            opt_model: AdamState::capture(&opt_m),
            opt_disc: AdamState::capture(&opt_d),
            rng_mc: rng_mc.clone(),
            best_val: Some(0.123),
            best_epoch: 2,
            epochs_since_improve: 1,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        save_checkpoint(&path, &ckpt).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.epoch, 3);
        assert_eq!(back.best_epoch, 2);

        let mut model2 = ReconModel::<f32>::new(4, 0.1, 999).unwrap();
        restore_model(&mut model2, &back.model).unwrap();
        for (a, b) in model.flat_params().iter().zip(model2.flat_params().iter()) {
            assert_bits_eq(a, b, "model param");
        }
        assert_bits_eq(
            &model.enc_bayes.w_prior.sigma,
            &model2.enc_bayes.w_prior.sigma,
            "prior sigma",
        );

        let mut disc2 = Discriminator::<f32>::new(4, 1234).unwrap();
        restore_disc(&mut disc2, &back.disc).unwrap();
        for (a, b) in disc.flat_params().iter().zip(disc2.flat_params().iter()) {
            assert_bits_eq(a, b, "disc param");
        }

        let mut opt_m2 = Adam::new(1e-4, 0.9, 0.999, 1e-8);
        back.opt_model.restore_into(&mut opt_m2).unwrap();
        assert_eq!(opt_m2.step_count, opt_m.step_count);
        for (a, b) in opt_m.m.iter().zip(opt_m2.m.iter()) {
            assert_bits_eq(a, b, "adam m");
        }
        for (a, b) in opt_m.v.iter().zip(opt_m2.v.iter()) {
            assert_bits_eq(a, b, "adam v");
        }

        // Restored RNG continues the stream identically.
        let mut restored = back.rng_mc.clone();
        let mut original = rng_mc;
        for _ in 0..16 {
            assert_eq!(original.gen::<u64>(), restored.gen::<u64>());
        }
    }

    #[test]
    fn strict_restore_rejects_tampering() {
        let (model, _, _, _) = make_state();
        let mut map = model_state(&model);
        map.remove("enc.0.w");
        let mut m = ReconModel::<f32>::new(4, 0.1, 5).unwrap();
        assert!(restore_model(&mut m, &map).is_err(), "missing key");

        let mut map = model_state(&model);
        map.insert("extra.key".into(), map.values().next().unwrap().clone());
        assert!(restore_model(&mut m, &map).is_err(), "extra key");

        let mut map = model_state(&model);
        let wrong = TensorData::encode(&ArrayD::zeros(IxDyn(&[1])));
        map.insert("enc.0.w".into(), wrong);
        assert!(restore_model(&mut m, &map).is_err(), "wrong shape");

        // Architecture mismatch (different channel count).
        let map = model_state(&model);
        let mut wide = ReconModel::<f32>::new(8, 0.1, 5).unwrap();
        assert!(restore_model(&mut wide, &map).is_err());
    }

    #[test]
    fn version_check() {
        let (model, disc, opt_m, opt_d) = make_state();
        let ckpt = Checkpoint {
            version: 999,
            epoch: 0,
            config: ExperimentConfig::smoke(),
            model: model_state(&model),
            disc: disc_state(&disc),
            opt_model: AdamState::capture(&opt_m),
            opt_disc: AdamState::capture(&opt_d),
            rng_mc: ChaCha20Rng::seed_from_u64(0),
            best_val: None,
            best_epoch: 0,
            epochs_since_improve: 0,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        let json = serde_json::to_string(&ckpt).unwrap();
        std::fs::write(&path, json).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
        std::fs::write(&path, "{ not json").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Json { .. })));
    }
}
