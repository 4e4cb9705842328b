//! Round-trip a dataset through CSV files, train on the normalized copy,
//! then save the model with its sidecar and reload it without the original
//! graph.
//!
//! cargo run --release --example checkpoint_io [-- out-dir]

use srnn::arch::ArchSpecs;
use srnn::data::Dataset;
use srnn::io::{decode_checkpoint, export_dataset, load_dataset, load_model, save_model, sidecar_path};
use srnn::runtime::{SrnnModel, TaskMode};
use srnn::tasks::{synth_motion, SynthMotionConfig};
use srnn::trainer::{train, NoiseSchedule, TrainConfig};

fn main() -> srnn::Result<()> {
    let tmp = tempfile::tempdir().expect("temp dir");
    let dir = std::env::args()
        .nth(1)
        .map_or_else(|| tmp.path().to_path_buf(), Into::into);

    let data = synth_motion(&SynthMotionConfig {
        sequences: 3,
        len: 120,
        ..Default::default()
    })?;
    let raw = Dataset {
        train: data.sequences[..2].to_vec(),
        test: data.sequences[2..].to_vec(),
        ..Default::default()
    };
    let manifest = export_dataset(&dir.join("data"), &data.graph, &raw)?;
    println!("exported {}", manifest.display());

    // loading fits normalization on the training split
    let loaded = load_dataset(&manifest, &data.graph, None)?;
    for (group, st) in &loaded.stats.groups {
        println!("  {group:<34} mean[0] {:+.3}  std[0] {:.3}", st.mean[0], st.std[0]);
    }

    let specs = ArchSpecs::uniform("LSTM(16)-FC(·)", "LSTM(8)");
    let mut model = SrnnModel::new(data.graph.clone(), &specs, 0)?;
    let config = TrainConfig {
        max_iterations: 20,
        batch_size: 10,
        bptt_len: 50,
        eval_every: 10,
        ..Default::default()
    };
    train(
        &mut model,
        &loaded.dataset,
        &config,
        &NoiseSchedule::none(),
        TaskMode::Regression,
    )?;

    let ckpt = dir.join("model.ckpt");
    save_model(&model, &ckpt, Some(&loaded.stats), Some("regression"))?;
    let bytes = std::fs::read(&ckpt).expect("checkpoint written");
    let records = decode_checkpoint(&bytes)?;
    println!("{}: {} bytes, {} records", ckpt.display(), bytes.len(), records.len());
    for r in records.iter().take(4) {
        println!("  {:<40} {:?}", r.name, r.value.shape());
    }
    println!("sidecar {}", sidecar_path(&ckpt).display());

    let (restored, meta) = load_model(&ckpt)?;
    let seq = &loaded.dataset.test[0];
    assert_eq!(model.predict(seq)?, restored.predict(seq)?);
    println!(
        "reloaded: task {:?}, normalization {}, predictions identical",
        meta.task,
        if meta.normalization.is_some() {
            "kept"
        } else {
            "missing"
        }
    );
    Ok(())
}
