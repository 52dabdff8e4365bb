//! Bounded worker pool feeding a single writer.

use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::mpsc;
use std::thread;

/// What the writer wants after consuming a result.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Flow {
    Continue,
    /// Schedule no further jobs; results already in flight are still
    /// delivered.
    Stop,
}

/// Runs `work` over `jobs` on at most `workers` threads and hands each
/// result, tagged with its job index, to `sink` on the calling thread.
/// Returns the number of jobs that were started.
pub fn run_pool<J, R, W, S>(jobs: &[J], workers: usize, work: W, mut sink: S) -> usize
where
    J: Sync,
    R: Send,
    W: Fn(&J) -> R + Sync,
    S: FnMut(usize, R) -> Flow,
{
    let next = AtomicUsize::new(0);
    let stop = AtomicBool::new(false);
    let started = AtomicUsize::new(0);
    let workers = workers.clamp(1, jobs.len().max(1));
    thread::scope(|s| {
        let (tx, rx) = mpsc::sync_channel::<(usize, R)>(workers);
        for _ in 0..workers {
            let tx = tx.clone();
            let (next, stop, started, work) = (&next, &stop, &started, &work);
            s.spawn(move || loop {
                if stop.load(Ordering::SeqCst) {
                    break;
                }
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(job) = jobs.get(i) else { break };
                started.fetch_add(1, Ordering::SeqCst);
                if tx.send((i, work(job))).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        for (i, r) in rx {
            if sink(i, r) == Flow::Stop {
                stop.store(true, Ordering::SeqCst);
            }
        }
    });
    started.into_inner()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::AtomicUsize;

    #[test]
    fn every_job_is_delivered_once() {
        let jobs: Vec<u64> = (0..200).collect();
        let mut seen = vec![0; jobs.len()];
        let started = run_pool(
            &jobs,
            8,
            |j| j * 2,
            |i, r| {
                assert_eq!(r, jobs[i] * 2);
                seen[i] += 1;
                Flow::Continue
            },
        );
        assert_eq!(started, 200);
        assert!(seen.iter().all(|&n| n == 1));
    }

    #[test]
    fn in_flight_work_is_bounded() {
        let live = AtomicUsize::new(0);
        let peak = AtomicUsize::new(0);
        let jobs: Vec<u32> = (0..64).collect();
        run_pool(
            &jobs,
            3,
            |_| {
                let now = live.fetch_add(1, Ordering::SeqCst) + 1;
                peak.fetch_max(now, Ordering::SeqCst);
                thread::sleep(std::time::Duration::from_millis(1));
                live.fetch_sub(1, Ordering::SeqCst);
            },
            |_, _| Flow::Continue,
        );
        assert!(peak.load(Ordering::SeqCst) <= 3);
    }

    #[test]
    fn stop_halts_scheduling() {
        let jobs: Vec<u32> = (0..1000).collect();
        let mut delivered = 0;
        let started = run_pool(
            &jobs,
            2,
            |j| *j,
            |_, _| {
                delivered += 1;
                Flow::Stop
            },
        );
        assert_eq!(started, delivered);
        assert!(started < 1000);
    }

    #[test]
    fn empty_job_list() {
        let jobs: Vec<u8> = Vec::new();
        assert_eq!(run_pool(&jobs, 4, |j| *j, |_, _| Flow::Continue), 0);
    }
}
