mod common;

use common::{small_fixture, small_train_config};
use semsplat::camera::Camera;
use semsplat::pipeline::{evaluate_heldout, query_frame, Prompt};
use semsplat::trainer::{train_scene, TrainOptions};
use semsplat::Error;

#[test]
fn queries_and_heldout_evaluation_on_a_small_scene() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = small_fixture(tmp.path(), 0);
    let (ck, _) = train_scene::<f32>(&ds, &small_train_config(60, 0), &TrainOptions::default()).unwrap();
    let codec = ds.codec.as_ref().unwrap();
    let lexicon = ds.lexicon.as_ref().unwrap();
    let cam: Camera<f32> = ds.camera_for(0).cast();
    for name in &ds.manifest.class_names {
        let q = query_frame(&ck.model, codec, lexicon, &cam, 0.5, &Prompt::Text(name.clone()), 0.4).unwrap();
        assert_eq!(q.relevancy.len(), 32 * 32);
        assert!(q.mask_consistent());
    }

    let masks = tmp.path().join("masks");
    let (ious, psnr) = evaluate_heldout(&ds, &ck.model, 0.4, Some(&masks)).unwrap();
    assert_eq!(ious.len(), ds.manifest.class_names.len());
    assert!(psnr.is_finite() && psnr > 0.0);
    let held = ds.split().1.len();
    assert_eq!(std::fs::read_dir(&masks).unwrap().count(), held * ious.len());
}

#[test]
fn prompt_errors_are_specific() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = small_fixture(tmp.path(), 1);
    let (ck, _) = train_scene::<f32>(&ds, &small_train_config(0, 1), &TrainOptions::default()).unwrap();
    let codec = ds.codec.as_ref().unwrap();
    let lexicon = ds.lexicon.as_ref().unwrap();
    let cam: Camera<f32> = ds.camera_for(0).cast();
    let run = |p: Prompt| query_frame(&ck.model, codec, lexicon, &cam, 0.0, &p, 0.4);

    match run(Prompt::Text("livr".into())) {
        Err(Error::UnknownPrompt { suggestions, .. }) => assert_eq!(suggestions[0], "liver"),
        other => panic!("expected an unknown prompt error, got {other:?}"),
    }
    let short = Prompt::Embedding {
        label: "custom".into(),
        values: vec![1.0; 3],
    };
    assert!(matches!(run(short), Err(Error::DimensionMismatch { .. })));
    let zero = Prompt::Embedding {
        label: "custom".into(),
        values: vec![0.0; lexicon.dim()],
    };
    assert!(run(zero).is_err());
    // a caller-supplied embedding equal to a lexicon entry scores identically
    let liver = lexicon.resolve("liver").unwrap().to_vec();
    let by_text = run(Prompt::Text("liver".into())).unwrap();
    let by_vec = run(Prompt::Embedding {
        label: "liver".into(),
        values: liver.iter().map(|v| v * 3.0).collect(),
    })
    .unwrap();
    assert_eq!(by_text.mask, by_vec.mask);
}
