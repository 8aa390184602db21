mod common;

use scunetpp_core::data::{synth_dataset, DataConfig, Dataset, PhantomParams, Split};
use scunetpp_core::model::{Model, ModelConfig};

fn small_data(seed: u64) -> DataConfig {
    DataConfig { cases: 3, slices: 2, seed, phantom: PhantomParams { img_size: 32, ..PhantomParams::default() }, ..DataConfig::default() }
}

fn tree_bytes(root: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn dataset_generation_is_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    synth_dataset(a.path(), &small_data(3)).unwrap();
    synth_dataset(b.path(), &small_data(3)).unwrap();
    assert_eq!(tree_bytes(a.path()), tree_bytes(b.path()));
    let c = tempfile::tempdir().unwrap();
    synth_dataset(c.path(), &small_data(4)).unwrap();
    assert_ne!(tree_bytes(a.path()), tree_bytes(c.path()));
}

#[test]
fn dataset_reload_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    synth_dataset(dir.path(), &small_data(5)).unwrap();
    let ds = Dataset::open(dir.path()).unwrap();
    let first = ds.load_split(Split::Train, 3).unwrap();
    let copy = tempfile::tempdir().unwrap();
    for (name, bytes) in tree_bytes(dir.path()) {
        let p = copy.path().join(name);
        std::fs::create_dir_all(p.parent().unwrap()).unwrap();
        std::fs::write(p, bytes).unwrap();
    }
    let second = Dataset::open(copy.path()).unwrap().load_split(Split::Train, 3).unwrap();
    assert_eq!(first.len(), 4);
    for (a, b) in first.iter().zip(&second) {
        assert_eq!(a.image, b.image);
        assert_eq!(a.mask, b.mask);
    }
}

#[test]
fn checkpoint_reload_gives_identical_predictions() {
    let cfg = ModelConfig { seed: 9, deep_supervision: true, ..ModelConfig::micro() };
    let model = Model::build(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckp1");
    model.save(&path).unwrap();
    let loaded = Model::load(&path).unwrap();
    assert_eq!(loaded.cfg, cfg);
    let x = common::random(&[2, 3, 32, 32], 1);
    assert_eq!(model.predict(&x).unwrap().data(), loaded.predict(&x).unwrap().data());
}
