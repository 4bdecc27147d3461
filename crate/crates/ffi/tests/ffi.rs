use std::ffi::{CStr, CString};
use std::ptr;

use chair_core::data::{generate, retrieval_split, write_jsonl, Protocol, SynthConfig};
use chair_core::model::{save_checkpoint, AnyModel, Checkpoint, CheckpointMeta};
use chair_core::retrieval::{self, recall_accuracy_at_k, recall_at_k};
use chair_core::training::{train_chair, TrainConfig};
use chair_ffi::*;
use tempfile::TempDir;

struct Fixture {
    _dir: TempDir,
    ck_path: CString,
    data_path: CString,
    ck: Checkpoint,
    ds: chair_core::data::Dataset,
}

fn fixture() -> Fixture {
    let dir = TempDir::new().unwrap();
    let ds = generate(&SynthConfig { num_classes: 8, num_concepts: 6, input_dim: 12, samples_per_class: 10, ..Default::default() }).unwrap();
    let split = retrieval_split(&ds).unwrap();
    let cfg = TrainConfig { stage1_epochs: 3, stage2_epochs: 2, batch_size: 16, hidden: 16, embed_dim: 8, ..Default::default() };
    let run = train_chair(&split.train, None, &cfg, true).unwrap();
    let ck = Checkpoint {
        model: AnyModel::Chair(run.model),
        meta: CheckpointMeta { protocol: Protocol::Retrieval, mode: Some(cfg.mode), stages: vec![1, 2], seed: 1 },
        intervention_values: Some(run.values),
    };
    let ck_file = dir.path().join("m.ck");
    let data_file = dir.path().join("d.jsonl");
    save_checkpoint(&ck, &ck_file).unwrap();
    write_jsonl(&ds, &data_file).unwrap();
    Fixture {
        ck_path: CString::new(ck_file.to_str().unwrap()).unwrap(),
        data_path: CString::new(data_file.to_str().unwrap()).unwrap(),
        _dir: dir,
        ck,
        ds,
    }
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(chair_last_error()) }.to_string_lossy().into_owned()
}

fn load(f: &Fixture) -> *mut ChairModel {
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { chair_model_load(f.ck_path.as_ptr(), &mut m) }, ChairStatus::Ok);
    assert!(!m.is_null());
    m
}

#[test]
fn embeddings_and_predictions_match_core() {
    let f = fixture();
    let m = load(&f);
    let mut dims = ChairDims { input_dim: 0, hidden: 0, embed_dim: 0, num_concepts: 0, num_classes: 0 };
    assert_eq!(unsafe { chair_model_dims(m, &mut dims) }, ChairStatus::Ok);
    assert_eq!((dims.input_dim, dims.embed_dim, dims.num_concepts, dims.num_classes), (12, 8, 6, 4));

    for e in f.ds.iter().take(10) {
        let base = f.ck.model.base(&e.x).unwrap();
        let want = f.ck.model.embedding(&base, None).unwrap();
        let mut got = vec![0.0; 8];
        assert_eq!(unsafe { chair_model_embed(m, e.x.as_ptr(), 12, ptr::null(), 0, got.as_mut_ptr(), 8) }, ChairStatus::Ok);
        assert_eq!(got, want);

        let mut logits = vec![0.0; 6];
        let mut acts = vec![0.0; 6];
        assert_eq!(unsafe { chair_model_concepts(m, e.x.as_ptr(), 12, logits.as_mut_ptr(), acts.as_mut_ptr(), 6) }, ChairStatus::Ok);
        assert_eq!(acts, base.concepts.as_ref().unwrap().activations);

        let forced: Vec<i8> = e.c.iter().map(|&b| b as i8).collect();
        let mut c_hat = vec![0.0; 6];
        assert_eq!(unsafe { chair_intervene_explicit(m, acts.as_ptr(), forced.as_ptr(), 6, c_hat.as_mut_ptr()) }, ChairStatus::Ok);
        let v = f.ck.intervention_values.as_ref().unwrap();
        for k in 0..6 {
            assert_eq!(c_hat[k], if e.c[k] == 1 { v.high[k] } else { v.low[k] });
        }
        let mut class = usize::MAX;
        assert_eq!(unsafe { chair_model_predict(m, e.x.as_ptr(), 12, c_hat.as_ptr(), 6, &mut class) }, ChairStatus::Ok);
        assert_eq!(class, f.ck.model.predict(&base, Some(&c_hat)).unwrap());
    }
    unsafe { chair_model_free(m) };
}

#[test]
fn gallery_search_and_metrics_match_core() {
    let f = fixture();
    let m = load(&f);
    let mut g = ptr::null_mut();
    assert_eq!(unsafe { chair_gallery_from_dataset(m, f.data_path.as_ptr(), 0.0, 1, &mut g) }, ChairStatus::Ok);
    let eval = retrieval_split(&f.ds).unwrap().eval;
    let gallery = retrieval::build_gallery(&f.ck.model, &eval, f.ck.intervention_values.as_ref(), 0.0, 1).unwrap();
    let mut n = 0;
    assert_eq!(unsafe { chair_gallery_len(g, &mut n) }, ChairStatus::Ok);
    assert_eq!(n, gallery.len());

    let k = 5;
    let (mut retrieved, mut truth, mut results) = (Vec::new(), Vec::new(), Vec::new());
    for e in eval.iter() {
        let base = f.ck.model.base(&e.x).unwrap();
        let q = f.ck.model.embedding(&base, None).unwrap();
        let want = retrieval::top_k(&gallery, &q, k, Some(e.id)).unwrap();
        let (mut ids, mut dist, mut labels) = (vec![0u64; k], vec![0.0; k], vec![0usize; k]);
        let (mut count, mut trunc) = (0usize, 9u8);
        let st = unsafe {
            chair_gallery_top_k(g, q.as_ptr(), q.len(), k, e.id as i64, ids.as_mut_ptr(), dist.as_mut_ptr(), labels.as_mut_ptr(), &mut count, &mut trunc)
        };
        assert_eq!(st, ChairStatus::Ok);
        assert_eq!(count, k);
        assert_eq!(trunc, 0);
        assert_eq!(ids, want.ids);
        assert_eq!(dist, want.distances);
        retrieved.extend_from_slice(&labels);
        truth.push(e.y);
        results.push(want);
    }
    let (mut r, mut ra) = (0.0, 0.0);
    assert_eq!(unsafe { chair_recall_at_k(retrieved.as_ptr(), truth.len(), k, truth.as_ptr(), &mut r) }, ChairStatus::Ok);
    assert_eq!(unsafe { chair_recall_accuracy_at_k(retrieved.as_ptr(), truth.len(), k, truth.as_ptr(), &mut ra) }, ChairStatus::Ok);
    assert_eq!(r, recall_at_k(&results, &truth).unwrap());
    assert_eq!(ra, recall_accuracy_at_k(&results, &truth).unwrap());
    unsafe {
        chair_gallery_free(g);
        chair_model_free(m);
    }
}

#[test]
fn errors_are_reported_as_codes() {
    let f = fixture();
    let mut m = ptr::null_mut();
    let missing = CString::new("/nonexistent/model.ck").unwrap();
    assert_eq!(unsafe { chair_model_load(missing.as_ptr(), &mut m) }, ChairStatus::Io);
    assert!(m.is_null());
    assert!(last_error().contains("/nonexistent/model.ck"));
    assert_eq!(unsafe { chair_model_load(ptr::null(), &mut m) }, ChairStatus::NullPointer);

    let m = load(&f);
    let x = vec![0.0; 11];
    let mut out = vec![0.0; 8];
    assert_eq!(unsafe { chair_model_embed(m, x.as_ptr(), 11, ptr::null(), 0, out.as_mut_ptr(), 8) }, ChairStatus::Dimension);
    let x = vec![0.0; 12];
    assert_eq!(unsafe { chair_model_embed(m, x.as_ptr(), 12, ptr::null(), 0, out.as_mut_ptr(), 4) }, ChairStatus::BufferTooSmall);
    assert!(!last_error().is_empty());
    unsafe { chair_model_free(m) };
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/chair.h")).unwrap();
    let src = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/src/lib.rs")).unwrap();
    let exported: Vec<&str> = src
        .lines()
        .filter_map(|l| l.trim().strip_prefix("pub unsafe extern \"C\" fn ").or_else(|| l.trim().strip_prefix("pub extern \"C\" fn ")))
        .map(|l| l.split('(').next().unwrap())
        .collect();
    assert!(exported.len() >= 18, "{exported:?}");
    for name in exported {
        assert!(header.contains(&format!("{name}(")), "{name} missing from header");
    }
    assert!(header.contains("CHAIR_STATUS_OK = 0"));
    assert!(header.contains("typedef struct ChairModel ChairModel;"));
}
