use super::*;
use crate::data::synthetic::{generate_split, SyntheticConfig};
use crate::data::{AugmentationConfig, Split};
use crate::diffusion::{DiffusionConfig, LatentDataset, LdmTrainer};
use crate::eval::{CriticClassifier, CriticConfig, CriticEmbedder, ImageEmbedder};
use crate::nn::Linear;
use crate::rae::{RAEConfig, RAEModel, RaeTrainer};
use crate::regularizers::{RegularizerKind, RegularizerSpec};
use ndarray::{Array1, Array2, Array4, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use std::collections::BTreeMap;
use std::path::PathBuf;

fn rng(seed: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(seed)
}

fn rand_nd(r: &mut ChaCha12Rng, shape: &[usize]) -> ArrayD<f64> {
    ArrayD::from_shape_simple_fn(IxDyn(shape), || r.gen::<f64>() - 0.5)
}

fn tmp_file(dir: &tempfile::TempDir, name: &str) -> PathBuf {
    dir.path().join(name)
}

// ---------------------------------------------------------------- npy

#[test]
fn npy_round_trips_common_shapes() {
    let dir = tempfile::tempdir().unwrap();
    let mut r = rng(11);
    let shapes: [&[usize]; 4] = [&[], &[5], &[3, 4], &[2, 3, 4]];
    for (i, shape) in shapes.iter().enumerate() {
        let mut a = rand_nd(&mut r, shape);
        if a.len() > 1 {
            // negative zero and a subnormal must survive bit-exactly
            a.as_slice_mut().unwrap()[0] = -0.0;
            a.as_slice_mut().unwrap()[1] = 5e-324;
        }
        let path = tmp_file(&dir, &format!("a{i}.npy"));
        write_npy(&path, &a).unwrap();
        let b = read_npy(&path).unwrap();
        assert_eq!(a.shape(), b.shape());
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }
}

#[test]
fn npy_header_is_padded_to_64_bytes_and_ends_in_newline() {
    let dir = tempfile::tempdir().unwrap();
    let path = tmp_file(&dir, "p.npy");
    let a = rand_nd(&mut rng(3), &[7, 2]);
    write_npy(&path, &a).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    let header_len = bytes.len() - 8 * a.len();
    assert_eq!(header_len % 64, 0);
    assert_eq!(bytes[header_len - 1], b'\n');
}

// Written by numpy 1.26 via np.save on
// [[0.5, -1.25, 2.0], [3.5, 0.0, -0.125]]; reading it back checks
// interoperability against an implementation we did not write.
const NUMPY_FIXTURE: &[u8] = include_bytes!("fixtures/numpy_2x3.npy");

#[test]
fn npy_reads_numpy_written_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = tmp_file(&dir, "fixture.npy");
    std::fs::write(&path, NUMPY_FIXTURE).unwrap();
    let a = read_npy(&path).unwrap();
    assert_eq!(a.shape(), &[2, 3]);
    let expected: [f64; 6] = [0.5, -1.25, 2.0, 3.5, 0.0, -0.125];
    for (x, y) in a.iter().zip(expected.iter()) {
        assert_eq!(x.to_bits(), y.to_bits());
    }
}

fn mutated_fixture(from: &[u8], to: &[u8]) -> Vec<u8> {
    assert_eq!(from.len(), to.len());
    let pos = NUMPY_FIXTURE
        .windows(from.len())
        .position(|w| w == from)
        .unwrap();
    let mut bytes = NUMPY_FIXTURE.to_vec();
    bytes[pos..pos + to.len()].copy_from_slice(to);
    bytes
}

#[test]
fn npy_rejects_fortran_order_and_wrong_dtype_and_truncation() {
    let dir = tempfile::tempdir().unwrap();
    let path = tmp_file(&dir, "bad.npy");

    std::fs::write(&path, mutated_fixture(b"False", b"True ")).unwrap();
    assert!(read_npy(&path).is_err());

    std::fs::write(&path, mutated_fixture(b"<f8", b"<f4")).unwrap();
    let err = read_npy(&path).unwrap_err().to_string();
    assert!(err.contains("'<f8'"), "{err}");

    std::fs::write(&path, &NUMPY_FIXTURE[..NUMPY_FIXTURE.len() - 8]).unwrap();
    assert!(read_npy(&path).is_err());

    let mut bytes = NUMPY_FIXTURE.to_vec();
    bytes[0] = b'X';
    std::fs::write(&path, &bytes).unwrap();
    let err = read_npy(&path).unwrap_err().to_string();
    assert!(err.contains("not an npy file"), "{err}");
}

// --------------------------------------------------------- checkpoint

fn sample_checkpoint(seed: u64) -> Checkpoint {
    let mut r = rng(seed);
    let params = vec![
        ("enc.w".to_string(), rand_nd(&mut r, &[3, 2, 5, 5])),
        ("enc.b".to_string(), rand_nd(&mut r, &[3])),
        ("head.w".to_string(), rand_nd(&mut r, &[4, 6])),
    ];
    let moments = params
        .iter()
        .map(|(_, p)| crate::nn::MomentPair {
            m: rand_nd(&mut r, p.shape()),
            v: rand_nd(&mut r, p.shape()),
        })
        .collect();
    Checkpoint {
        section: SECTION_RAE.to_string(),
        config_toml: "latent_dim = 4\n".to_string(),
        epoch: 17,
        base_seed: 0xDEAD_BEEF,
        meta: vec![("loss".to_string(), 0.125), ("gate".to_string(), 0.93)],
        params,
        state: vec![("enc.bn.mean".to_string(), rand_nd(&mut r, &[3]))],
        optimizer: Some(AdamState {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
            decoupled: true,
            step_count: 42,
            moments,
        }),
    }
}

#[test]
fn checkpoint_save_load_save_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let p1 = tmp_file(&dir, "a.ckpt");
    let p2 = tmp_file(&dir, "b.ckpt");
    let ckpt = sample_checkpoint(21);
    ckpt.save(&p1).unwrap();
    let loaded = Checkpoint::load(&p1).unwrap();
    loaded.save(&p2).unwrap();
    let b1 = std::fs::read(&p1).unwrap();
    let b2 = std::fs::read(&p2).unwrap();
    assert_eq!(b1, b2);

    assert_eq!(loaded.section, ckpt.section);
    assert_eq!(loaded.config_toml, ckpt.config_toml);
    assert_eq!(loaded.epoch, 17);
    assert_eq!(loaded.base_seed, 0xDEAD_BEEF);
    assert_eq!(loaded.meta_value("gate"), Some(0.93));
    assert_eq!(loaded.meta_value("missing"), None);
    assert_eq!(loaded.params.len(), 3);
    assert_eq!(loaded.params[0].1.shape(), &[3, 2, 5, 5]);
    let opt = loaded.optimizer.as_ref().unwrap();
    assert_eq!(opt.step_count, 42);
    assert!(opt.decoupled);
    assert_eq!(opt.moments.len(), 3);
}

#[test]
fn checkpoint_detects_corruption_truncation_and_bad_magic() {
    let dir = tempfile::tempdir().unwrap();
    let path = tmp_file(&dir, "c.ckpt");
    sample_checkpoint(22).save(&path).unwrap();
    let good = std::fs::read(&path).unwrap();

    let mut bad = good.clone();
    let mid = bad.len() / 2;
    bad[mid] ^= 0x40;
    std::fs::write(&path, &bad).unwrap();
    let err = Checkpoint::load(&path).unwrap_err().to_string();
    assert!(err.contains("checksum mismatch"), "{err}");

    std::fs::write(&path, &good[..good.len() - 5]).unwrap();
    assert!(Checkpoint::load(&path).is_err());

    let mut bad = good.clone();
    bad[..8].copy_from_slice(b"NOTACKPT");
    std::fs::write(&path, &bad).unwrap();
    let err = Checkpoint::load(&path).unwrap_err().to_string();
    assert!(err.contains("not a checkpoint file"), "{err}");
}

#[test]
fn loaders_reject_checkpoints_from_another_stage() {
    let dir = tempfile::tempdir().unwrap();
    let path = tmp_file(&dir, "wrong.ckpt");
    let mut ckpt = sample_checkpoint(23);
    ckpt.section = SECTION_RAE.to_string();
    ckpt.save(&path).unwrap();
    let err = load_ldm_trainer(&path).unwrap_err().to_string();
    assert!(err.contains("expected a `ldm` checkpoint"), "{err}");
}

// ------------------------------------------------------------- resume

fn tiny_split(seed: u64) -> crate::data::DatasetSplit {
    let cfg = SyntheticConfig {
        n_train_categories: 2,
        n_test_categories: 1,
        samples_per_category: 3,
        ..SyntheticConfig::default()
    };
    generate_split(&cfg, seed, Split::Train)
}

fn assert_params_bit_equal(a: &[(String, ArrayD<f64>)], b: &[(String, ArrayD<f64>)]) {
    assert_eq!(a.len(), b.len());
    for ((na, va), (nb, vb)) in a.iter().zip(b.iter()) {
        assert_eq!(na, nb);
        assert_eq!(va.shape(), vb.shape(), "{na}");
        for (x, y) in va.iter().zip(vb.iter()) {
            assert_eq!(x.to_bits(), y.to_bits(), "{na}");
        }
    }
}

fn rae_snapshot(t: &mut RaeTrainer) -> Vec<(String, ArrayD<f64>)> {
    let mut params = t.model.params();
    params.extend(t.bank.params());
    let mut out = capture_params(&mut params);
    out.extend(stats_to_arrays(t.model.running_stats()));
    out
}

#[test]
fn rae_resume_from_checkpoint_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let path = tmp_file(&dir, "rae.ckpt");
    let split = tiny_split(5);
    let config = RAEConfig {
        latent_dim: 4,
        channels: [2, 2, 2, 2],
        epochs: 2,
        batch_size: 4,
        learning_rate: 1e-3,
        ..RAEConfig::default()
    };
    let specs = vec![
        RegularizerSpec::new(RegularizerKind::Kl, 1e-3),
        RegularizerSpec::new(RegularizerKind::Prototype, 0.1),
    ];
    let aug = AugmentationConfig::default();
    let probe = Array4::from_shape_simple_fn((2, 1, 48, 48), || 0.3);

    let mut a = RaeTrainer::new(&config, &specs, &split, &aug, 99).unwrap();
    a.run_epoch(&split).unwrap();
    save_rae_trainer(&path, &mut a).unwrap();
    let probe_latents = a.model.encode(&probe).unwrap();
    let probe_codes = probe_latents.point();

    a.run_epoch(&split).unwrap();
    let after_a = rae_snapshot(&mut a);

    let mut b = load_rae_trainer(&path, &split).unwrap();
    assert_eq!(b.epochs_done, 1);
    assert_eq!(b.base_seed, 99);
    let b_latents = b.model.encode(&probe).unwrap();
    let b_codes = b_latents.point();
    assert_eq!(
        probe_codes.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
        b_codes.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
    );
    b.run_epoch(&split).unwrap();
    let after_b = rae_snapshot(&mut b);

    assert_params_bit_equal(&after_a, &after_b);
    assert_eq!(a.opt.step_count, b.opt.step_count);
    assert_eq!(a.epochs_done, b.epochs_done);

    // model-only load matches the frozen encoder
    let (model, echo) = load_rae_model(&path).unwrap();
    let m_latents = model.encode(&probe).unwrap();
    let m_codes = m_latents.point();
    assert_eq!(
        probe_codes.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
        m_codes.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
    );
    assert_eq!(echo.config, config);
    assert_eq!(echo.specs, specs);
}

#[test]
fn ldm_resume_from_checkpoint_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let path = tmp_file(&dir, "ldm.ckpt");
    let mut r = rng(31);
    let d = 4;
    let z = Array2::from_shape_simple_fn((12, d), || r.gen::<f64>() - 0.5);
    let labels: Vec<usize> = (0..12).map(|i| i % 2).collect();
    let mut exemplar_z = BTreeMap::new();
    for cat in 0..2usize {
        exemplar_z.insert(cat, Array1::from_shape_simple_fn(d, || r.gen::<f64>()));
    }
    let data = LatentDataset {
        z,
        labels,
        exemplar_z,
    };
    let config = DiffusionConfig {
        latent_dim: d,
        time_embed_dim: 8,
        t_steps: 50,
        epochs: 2,
        batch_size: 4,
        learning_rate: 1e-3,
        ..DiffusionConfig::default()
    };

    let mut a = LdmTrainer::new(&config, 123).unwrap();
    a.run_epoch(&data).unwrap();
    save_ldm_trainer(&path, &mut a).unwrap();
    a.run_epoch(&data).unwrap();
    let after_a = capture_params(&mut a.predictor.params());

    let mut b = load_ldm_trainer(&path).unwrap();
    assert_eq!(b.epochs_done, 1);
    assert_eq!(b.config, config);
    b.run_epoch(&data).unwrap();
    let after_b = capture_params(&mut b.predictor.params());

    assert_params_bit_equal(&after_a, &after_b);
    assert_eq!(a.opt.step_count, b.opt.step_count);
}

// ------------------------------------------------------------ critics

#[test]
fn critic_checkpoints_round_trip_embeddings() {
    let dir = tempfile::tempdir().unwrap();
    let config = CriticConfig {
        embed_dim: 8,
        channels: [2, 4, 4, 4],
        head_dim: 8,
        ..CriticConfig::default()
    };
    let backbone = config.backbone_config();
    let mut r = rng(41);
    let classifier = CriticClassifier {
        net: RAEModel::new(&mut r, &backbone, false).unwrap(),
        head: Linear::new(&mut r, config.embed_dim, config.head_dim, true),
        gate_accuracy: 0.93,
    };
    let embedder = CriticEmbedder {
        net: RAEModel::new(&mut r, &backbone, false).unwrap(),
    };
    let images = Array4::from_shape_simple_fn((3, 1, 48, 48), || r.gen::<f64>());

    save_critics(dir.path(), &classifier, &embedder, &config).unwrap();
    assert!(dir.path().join(CLASSIFIER_FILE).exists());
    assert!(dir.path().join(EMBEDDER_FILE).exists());
    let (cls2, emb2) = load_critics(dir.path()).unwrap();

    assert_eq!(cls2.gate_accuracy, 0.93);
    assert_eq!(cls2.embed_dim(), classifier.embed_dim());
    let e1 = classifier.embed(&images).unwrap();
    let e2 = cls2.embed(&images).unwrap();
    assert_eq!(
        e1.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
        e2.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
    );
    let f1 = embedder.embed(&images).unwrap();
    let f2 = emb2.embed(&images).unwrap();
    assert_eq!(
        f1.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
        f2.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
    );
}
