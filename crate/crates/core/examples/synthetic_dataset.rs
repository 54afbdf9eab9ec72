//! Writes a synthetic cardiac-style dataset with split manifests, then
//! reads it back through the directory loader.
//!
//! cargo run --release --example synthetic_dataset -- [out_dir]

use std::path::PathBuf;

use ucyclemlp::dataio::{load_splits, save_dataset, split, synth_generate, write_manifests, SplitSpec};

fn main() -> ucyclemlp::Result<()> {
    let dir = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("ucyclemlp-synth"));
    let data = synth_generate(20, 64, 4, 7)?;
    save_dataset(&dir, &data)?;
    let spec = SplitSpec {
        seed: 7,
        ..SplitSpec::default()
    };
    write_manifests(&dir, &split(&data.ids(), &spec)?)?;

    let (train, val, test) = load_splits(&dir, 4, &spec)?;
    println!("{} -> train {} val {} test {}", dir.display(), train.len(), val.len(), test.len());
    let mut counts = [0usize; 4];
    for s in &train.samples {
        for &l in &s.mask {
            counts[l as usize] += 1;
        }
    }
    println!("train label histogram {counts:?}");
    Ok(())
}
