//! Helpers shared by the integration tests.

use std::path::Path;
use std::process::{Command, Output};

pub fn elbnn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_elbnn"))
        .args(args)
        .env("ELBNN_THREADS", "1")
        .output()
        .expect("binary runs")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// CIFAR-10 binary batches whose label decides which pixel rows are bright.
pub fn write_cifar(dir: &Path, per_batch: usize) {
    let record = |i: usize| {
        let label = (i * 7 + 3) % 10;
        let mut r = vec![label as u8];
        for c in 0..3 {
            for y in 0..32 {
                for x in 0..32 {
                    let on = y / 3 == label;
                    r.push(if on {
                        200
                    } else {
                        ((x * 13 + y * 7 + c * 5 + i) % 60) as u8
                    });
                }
            }
        }
        r
    };
    let batch =
        |offset: usize, n: usize| -> Vec<u8> { (offset..offset + n).flat_map(record).collect() };
    for b in 1..=5 {
        std::fs::write(
            dir.join(format!("data_batch_{b}.bin")),
            batch(b * 1000, per_batch),
        )
        .unwrap();
    }
    std::fs::write(dir.join("test_batch.bin"), batch(0, per_batch)).unwrap();
}
