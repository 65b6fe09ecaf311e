use std::io::Cursor;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pfs_kd::data::{generate, generate_split, load_split, DatasetSpec, Split};
use pfs_kd::models::{checkpoint_bytes, checkpoint_from_bytes, load_checkpoint_expecting, Network, SegNetSpec};
use pfs_kd::tensor::{encode_tensor, load_tensor, read_tensor, save_tensor};
use pfs_kd::trainer::{fit, step_csv, DistillMode, FitInputs, TeacherCache, TrainConfig};
use pfs_kd::{Error, Tensor};

fn small_spec() -> DatasetSpec {
    DatasetSpec {
        train_count: 16,
        val_count: 8,
        ..DatasetSpec::default()
    }
}

#[test]
fn tensor_file_roundtrip_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = Tensor::<f32>::from_fn(&[2, 3, 4], |_| rng.gen());
    let b = Tensor::<f64>::from_fn(&[5, 1], |_| rng.gen::<f64>() * 1e300);
    let c = Tensor::<u8>::from_fn(&[7], |i| i as u8 * 30);
    let paths = [dir.path().join("a"), dir.path().join("b"), dir.path().join("c")];
    save_tensor(&a, &paths[0]).unwrap();
    save_tensor(&b, &paths[1]).unwrap();
    save_tensor(&c, &paths[2]).unwrap();
    let a2 = load_tensor::<f32>(&paths[0]).unwrap();
    let b2 = load_tensor::<f64>(&paths[1]).unwrap();
    assert_eq!(a2.shape(), a.shape());
    assert!(a.data().iter().zip(a2.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    assert!(b.data().iter().zip(b2.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    assert_eq!(load_tensor::<u8>(&paths[2]).unwrap(), c);

    let bytes = encode_tensor(&a).unwrap();
    assert_eq!(std::fs::read(&paths[0]).unwrap(), bytes);
    let again = encode_tensor(&read_tensor::<f32>(&mut Cursor::new(&bytes)).unwrap()).unwrap();
    assert_eq!(bytes, again);
    assert!(matches!(load_tensor::<f64>(&paths[0]), Err(Error::DTypeMismatch { .. })));
}

#[test]
fn checkpoint_roundtrip_is_bitwise() {
    for spec in [SegNetSpec::default_teacher(4), SegNetSpec::default_student(4)] {
        let mut net = Network::<f32>::build(spec.clone(), 5).unwrap();
        net.set_gamma(0.25);
        let bytes = checkpoint_bytes(&net).unwrap();
        let back = checkpoint_from_bytes::<f32>(&bytes).unwrap();
        assert_eq!(checkpoint_bytes(&back).unwrap(), bytes);
        assert_eq!(back.param_hash(), net.param_hash());
        assert_eq!(back.spec(), net.spec());
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.ckpt");
    let net = Network::<f64>::build(SegNetSpec::default_student(4), 1).unwrap();
    pfs_kd::models::save_checkpoint(&net, &path).unwrap();
    let err = load_checkpoint_expecting::<f64>(&path, &SegNetSpec::default_teacher(4)).unwrap_err();
    assert!(matches!(err, Error::SpecMismatch(_)));
}

#[test]
fn dataset_files_match_in_memory_generation() {
    let dir = tempfile::tempdir().unwrap();
    let spec = small_spec();
    generate(&spec, dir.path()).unwrap();
    let val = load_split(dir.path(), Split::Val).unwrap();
    let mem = generate_split(&spec, Split::Val);
    assert_eq!(val.len(), 8);
    assert_eq!(val.images, mem.images);
    assert_eq!(val.labels, mem.labels);

    let other = tempfile::tempdir().unwrap();
    generate(&spec, other.path()).unwrap();
    let a = std::fs::read(dir.path().join("train/00003.img.pfst")).unwrap();
    let b = std::fs::read(other.path().join("train/00003.img.pfst")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn distillation_logs_are_reproducible_and_teacher_is_untouched() {
    let spec = small_spec();
    let (train, val) = (generate_split(&spec, Split::Train), generate_split(&spec, Split::Val));
    let teacher = Network::<f32>::build(SegNetSpec::default_teacher(4), 2).unwrap();
    let hash = teacher.param_hash();
    let run = |augment: bool| {
        let cfg = TrainConfig {
            epochs: 2,
            mode: DistillMode::PfsGap,
            augment,
            seed: 9,
            ..TrainConfig::default()
        };
        let cache = TeacherCache::build(&teacher, &train, 8).unwrap();
        let student = Network::<f32>::build(cfg.student.clone(), cfg.seed).unwrap();
        let out = fit(
            &cfg,
            student,
            FitInputs {
                train: &train,
                val: &val,
                teacher: Some(&teacher),
                cache: (!augment).then_some(&cache),
            },
        )
        .unwrap();
        assert_eq!(out.teacher_hash_before.as_deref(), Some(hash.as_str()));
        assert_eq!(out.teacher_hash_after.as_deref(), Some(hash.as_str()));
        step_csv(&out.steps)
    };
    for augment in [false, true] {
        assert_eq!(run(augment), run(augment));
    }
    assert_eq!(teacher.param_hash(), hash);
}
