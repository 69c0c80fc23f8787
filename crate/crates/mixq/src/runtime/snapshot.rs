//! Versioned parameter snapshots shared from the learner to actors and
//! evaluators. Publication swaps one `Arc`, so a reader never observes a
//! torn update; actors refresh at episode boundaries.

use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};

use crate::intrinsic::{ApEmbedder, RndPair};
use crate::nn::layers::ParamSet;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Snapshot {
    pub version: u64,
    /// Online network parameters; actors act with these.
    pub acting: ParamSet,
    /// EMA evaluation parameters; evaluators use these.
    pub eval: ParamSet,
    pub ap: ApEmbedder,
    pub rnd: RndPair,
}

pub struct SnapshotRegister {
    current: RwLock<Arc<Snapshot>>,
}

impl SnapshotRegister {
    pub fn new(initial: Snapshot) -> Self {
        SnapshotRegister {
            current: RwLock::new(Arc::new(initial)),
        }
    }

    pub fn publish(&self, snap: Snapshot) {
        *self.current.write().unwrap() = Arc::new(snap);
    }

    pub fn latest(&self) -> Arc<Snapshot> {
        Arc::clone(&self.current.read().unwrap())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::mat::Mat;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn snap_with(version: u64, fill: f64) -> Snapshot {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Snapshot {
            version,
            acting: ParamSet {
                mats: vec![Mat::filled(4, 4, fill)],
                names: vec!["p".into()],
            },
            eval: ParamSet {
                mats: vec![Mat::filled(4, 4, fill)],
                names: vec!["p".into()],
            },
            ap: ApEmbedder::new(2, 4, 2, 2, &mut rng),
            rnd: RndPair::new(2, 4, 2, &mut rng),
        }
    }

    #[test]
    fn readers_never_see_torn_updates() {
        // A writer republishes snapshots whose parameters are all equal to
        // the version number; readers must always observe internally
        // consistent snapshots.
        let reg = Arc::new(SnapshotRegister::new(snap_with(0, 0.0)));
        let stop = Arc::new(std::sync::atomic::AtomicBool::new(false));
        let mut handles = Vec::new();
        for _ in 0..3 {
            let reg = Arc::clone(&reg);
            let stop = Arc::clone(&stop);
            handles.push(std::thread::spawn(move || {
                while !stop.load(std::sync::atomic::Ordering::Relaxed) {
                    let s = reg.latest();
                    let expect = s.version as f64;
                    for m in &s.acting.mats {
                        for &v in &m.data {
                            assert_eq!(v, expect, "torn snapshot");
                        }
                    }
                }
            }));
        }
        for v in 1..200u64 {
            reg.publish(snap_with(v, v as f64));
        }
        stop.store(true, std::sync::atomic::Ordering::Relaxed);
        for h in handles {
            h.join().unwrap();
        }
        assert_eq!(reg.latest().version, 199);
    }
}
