//! Class-stratified sampling of fixed-length training windows.

use blinknet_tensor::RngStream;

use crate::datagen::SequenceSample;
use crate::error::{Error, Result};
use crate::semantics::{FrameLabel, IntentState};

/// A contiguous slice `start..start + len` of sequence `sequence`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Window {
    pub sequence: usize,
    pub start: usize,
    pub len: usize,
}

/// Most frequent intent among `labels`; ties go to the lower class index.
pub fn majority_intent(labels: &[FrameLabel]) -> Option<IntentState> {
    let mut counts = [0usize; IntentState::COUNT];
    labels.iter().for_each(|l| counts[l.intent.index()] += 1);
    let (best, &n) = counts.iter().enumerate().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))?;
    (n > 0).then(|| IntentState::ALL[best])
}

/// Every window of a dataset, pooled by majority intent. A batch slot first
/// draws a class uniformly, then a window uniformly within that class, so
/// each class fills the same expected share of every batch.
#[derive(Clone, Debug)]
pub struct StratifiedSampler {
    pools: Vec<Vec<Window>>,
    window: usize,
    eligible: usize,
}

impl StratifiedSampler {
    /// Sequences shorter than `window` are skipped with a warning. Fails if a
    /// class ends up with no window at all.
    pub fn new(samples: &[SequenceSample], window: usize) -> Result<Self> {
        if window == 0 {
            return Err(Error::config("train.window", "must be positive"));
        }
        let mut pools = vec![Vec::new(); IntentState::COUNT];
        let mut eligible = 0;
        for (i, s) in samples.iter().enumerate() {
            if s.len() < window {
                log::warn!("sequence {i} has {} frames, fewer than the window of {window}; skipped", s.len());
                continue;
            }
            eligible += 1;
            for start in 0..=s.len() - window {
                let class = majority_intent(&s.labels[start..start + window]).expect("window is nonempty");
                pools[class.index()].push(Window {
                    sequence: i,
                    start,
                    len: window,
                });
            }
        }
        if let Some(missing) = pools.iter().position(Vec::is_empty) {
            return Err(Error::MissingClass(IntentState::ALL[missing]));
        }
        Ok(StratifiedSampler { pools, window, eligible })
    }

    pub fn window(&self) -> usize {
        self.window
    }

    /// Sequences long enough to yield a window.
    pub fn eligible_sequences(&self) -> usize {
        self.eligible
    }

    /// Windows whose majority intent is `class`.
    pub fn pool(&self, class: IntentState) -> &[Window] {
        &self.pools[class.index()]
    }

    pub fn draw(&self, rng: &mut RngStream) -> Window {
        let pool = &self.pools[rng.below(self.pools.len() as u64) as usize];
        pool[rng.below(pool.len() as u64) as usize]
    }

    /// `count` windows grouped into batches of `batch` (the last may be
    /// smaller). The result depends only on the pools and `rng`.
    pub fn batches(&self, count: usize, batch: usize, rng: &mut RngStream) -> Vec<Vec<Window>> {
        let windows: Vec<Window> = (0..count).map(|_| self.draw(rng)).collect();
        windows.chunks(batch.max(1)).map(<[Window]>::to_vec).collect()
    }
}
