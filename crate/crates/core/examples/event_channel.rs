//! Per-core event channels: writers record block/unblock events, a single
//! reader drains both halves at once and the counter clears on read.

use std::sync::Arc;
use std::thread;
use std::time::Duration;

use umt::event_channel::{pack, unpack, wait_any, ChannelSet, EventChannel, OverflowMode};

fn main() {
    let ch = EventChannel::new(OverflowMode::Strict);
    ch.record_block().unwrap();
    ch.record_block().unwrap();
    ch.record_unblock().unwrap();
    let batch = ch.try_drain().unwrap();
    println!("drained {batch:?}, net ready change {}", batch.net());
    println!("after drain: empty={}", ch.peek().is_empty());

    let packed = pack(3, 7).unwrap();
    println!("pack(3, 7) = {packed:#018x} -> {:?}", unpack(packed));

    let full = EventChannel::preloaded(OverflowMode::Strict, u32::MAX, 0);
    println!("strict overflow: {:?}", full.record_block());

    // one reader multiplexing four channels written from other threads
    let set = ChannelSet::new(4, OverflowMode::Strict);
    let writers: Vec<_> = (0..4)
        .map(|core| {
            let ch = Arc::clone(&set.channels()[core]);
            thread::spawn(move || {
                thread::sleep(Duration::from_millis(2 * core as u64));
                ch.record_block().unwrap();
                ch.record_unblock().unwrap();
            })
        })
        .collect();
    let mut seen = 0;
    while seen < 8 {
        for core in wait_any(&set, Duration::from_millis(1)) {
            let b = set.channels()[core].try_drain().unwrap_or_default();
            seen += b.blocked + b.unblocked;
            println!("core {core}: {b:?}");
        }
    }
    for w in writers {
        w.join().unwrap();
    }
}
