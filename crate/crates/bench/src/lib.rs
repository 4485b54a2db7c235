//! Fixtures shared by the benchmarks and timing checks.

use std::time::{Duration, Instant};

use wecon_core::model::DecoderContext;
use wecon_core::problems::RolloutState;
use wecon_core::{generate_instance, DecoderKind, Instance, Model, ModelConfig, ProblemKind, Tape, WeightVector};

/// A model encoded once and parked halfway through a tour, so that one
/// decoder step can be repeated without re-encoding.
pub struct StepFixture {
    pub model: Model<f32>,
    pub inst: Instance,
    pub state: RolloutState,
    tape: Tape<f32>,
    dc: DecoderContext,
    mark: usize,
}

impl StepFixture {
    pub fn new(decoder: DecoderKind, d: usize, n: usize, seed: u64) -> wecon_core::Result<Self> {
        let cfg = ModelConfig {
            d,
            decoder,
            ..ModelConfig::default()
        };
        let model = Model::<f32>::new(ProblemKind::BiTsp, cfg, seed)?;
        let inst = generate_instance(ProblemKind::BiTsp, n, seed)?;
        let w = WeightVector::new(vec![0.5, 0.5])?;
        let mut tape = Tape::new();
        let enc = model.encode(&mut tape, &inst, &w)?;
        let dc = model.decoder_context(&mut tape, enc)?;
        let mut state = RolloutState::new(&inst);
        for v in 0..n / 2 {
            state.apply(&inst, v)?;
        }
        let mark = tape.len();
        Ok(Self {
            model,
            inst,
            state,
            tape,
            dc,
            mark,
        })
    }

    /// Action probabilities for the parked state.
    pub fn step(&mut self) -> Vec<f64> {
        let p = self
            .model
            .decoder_step(&mut self.tape, &self.dc, &self.inst, &self.state)
            .expect("fixture state has feasible nodes");
        self.tape.truncate(self.mark);
        p
    }
}

/// Median over `reps` repetitions of the mean time of `iters` steps.
pub fn median_step_time(fixture: &mut StepFixture, reps: usize, iters: usize) -> Duration {
    for _ in 0..iters.min(10) {
        std::hint::black_box(fixture.step());
    }
    let mut times: Vec<Duration> = (0..reps)
        .map(|_| {
            let t = Instant::now();
            for _ in 0..iters {
                std::hint::black_box(fixture.step());
            }
            t.elapsed() / iters as u32
        })
        .collect();
    times.sort();
    times[times.len() / 2]
}
