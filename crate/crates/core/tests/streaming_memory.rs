use std::alloc::{GlobalAlloc, Layout, System};
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::sync::atomic::{AtomicUsize, Ordering};

use vgpo_core::synth::SynthLab;
use vgpo_core::trace::{read_trace, record_line};
use vgpo_core::SynthConfig;

struct Counting;

static CURRENT: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);

unsafe impl GlobalAlloc for Counting {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = unsafe { System.alloc(layout) };
        if !p.is_null() {
            let now = CURRENT.fetch_add(layout.size(), Ordering::Relaxed) + layout.size();
            PEAK.fetch_max(now, Ordering::Relaxed);
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        unsafe { System.dealloc(ptr, layout) };
        CURRENT.fetch_sub(layout.size(), Ordering::Relaxed);
    }
}

#[global_allocator]
static ALLOC: Counting = Counting;

#[test]
fn reading_ten_thousand_groups_keeps_one_in_memory() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("big.jsonl");
    let cfg = SynthConfig {
        dim: 4,
        seq_len: 6,
        group_size: 4,
        ..SynthConfig::default()
    };
    let (lab, mut rng) = SynthLab::new(cfg).unwrap();
    let mut largest = 0;
    {
        let mut out = BufWriter::new(File::create(&path).unwrap());
        for k in 0..10_000 {
            let line = record_line(&lab.generate_group(format!("g{k}"), &mut rng).group);
            largest = largest.max(line.len());
            writeln!(out, "{line}").unwrap();
        }
    }
    let file_size = std::fs::metadata(&path).unwrap().len() as usize;

    let reader = BufReader::new(File::open(&path).unwrap());
    let baseline = CURRENT.load(Ordering::Relaxed);
    PEAK.store(baseline, Ordering::Relaxed);
    let mut count = 0;
    for g in read_trace(reader) {
        let g = g.unwrap();
        assert_eq!(g.trajectories.len(), 4);
        count += 1;
    }
    let peak = PEAK.load(Ordering::Relaxed) - baseline;

    assert_eq!(count, 10_000);
    let bound = 32 * largest + 64 * 1024;
    assert!(peak < bound, "peak {peak} bytes, bound {bound}");
    assert!(file_size > 50 * bound, "file {file_size} too small to tell");
}
