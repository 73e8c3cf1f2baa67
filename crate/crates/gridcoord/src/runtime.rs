//! Deterministic agent simulation of the two-stage negotiation.
//!
//! The coordinator and the regional planners exchange typed messages over
//! an in-process bus: the coordinator announces a stage, planners submit
//! proposals, the coordinator replies with its decision, bound report,
//! and per-planner price updates, and a terminate notice closes each
//! stage. The bus keeps every message, so a run is an auditable log: each
//! price update equals the published update formulas applied to the
//! proposals logged before it.
//!
//! Scheduling is synchronous (everyone answers every round) or
//! seeded-asynchronous: each planner skips a round with probability `p`,
//! but never more than `staleness` rounds in a row, and the coordinator
//! reuses the planner's latest logged proposal while it is away. A skipped
//! planner's prices stay frozen, so when it returns it re-solves the
//! identical subproblem and reproduces its stale proposal; stale consensus
//! is therefore as good as fresh. Everything is driven by one seeded RNG,
//! making runs with equal config and seed byte-identical.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::netmodel::Network;
use crate::stage1::{
    DualSet, RegionalProposal, Stage1Config, Stage1Engine, Stage1Error, Stage1Result, TpcDecision,
};
use crate::stage2::{
    BeliefSet, Stage2Config, Stage2Engine, Stage2Error, Stage2Result,
};

pub const COORDINATOR: &str = "tpc";
pub const BROADCAST: &str = "*";

/// One bus message. `round` is the global bus round: stage one rounds,
/// then stage two rounds continuing the same counter, so stamps are
/// nondecreasing per sender across the whole run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub round: usize,
    pub sender: String,
    pub receiver: String,
    #[serde(flatten)]
    pub payload: Payload,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload")]
pub enum Payload {
    AnnounceStage { stage: u8 },
    DualUpdate(Prices),
    RegionalProposal(Proposal),
    TpcDecision(Decision),
    BoundReport(Bounds),
    Terminate { reason: String },
}

impl Payload {
    pub fn kind(&self) -> &'static str {
        match self {
            Payload::AnnounceStage { .. } => "AnnounceStage",
            Payload::DualUpdate(_) => "DualUpdate",
            Payload::RegionalProposal(_) => "RegionalProposal",
            Payload::TpcDecision(_) => "TpcDecision",
            Payload::BoundReport(_) => "BoundReport",
            Payload::Terminate { .. } => "Terminate",
        }
    }
}

/// Coordinator-to-planner price state, per stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Prices {
    Investment(DualSet),
    /// Boundary-angle prices of one region, `[scenario][line][end]`.
    Boundary(Vec<Vec<[f64; 2]>>),
}

/// Planner-to-coordinator submission, per stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Proposal {
    Build(RegionalProposal),
    /// The region's boundary-angle beliefs, `[scenario][line][end]`.
    Beliefs(Vec<Vec<[f64; 2]>>),
}

/// Coordinator publication closing a round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Decision {
    Build(TpcDecision),
    /// The full belief board every planner anchors against next round.
    Beliefs(BeliefSet),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Bounds {
    Gap { lb: f64, ub: f64, gap: f64 },
    Residual { residual: f64, movement: f64, objective: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScheduleMode {
    Synchronous,
    Asynchronous,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Schedule {
    pub mode: ScheduleMode,
    /// Per-planner, per-round skip probability; only read asynchronously.
    pub skip_probability: f64,
    pub seed: u64,
    /// Longest run of consecutive skips before participation is forced.
    pub staleness: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            mode: ScheduleMode::Synchronous,
            skip_probability: 0.0,
            seed: 0,
            staleness: 3,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub schedule: Schedule,
}

#[derive(Debug, Clone)]
pub struct PipelineResult {
    pub stage1: Stage1Result,
    pub stage2: Stage2Result,
    pub messages: Vec<Message>,
}

#[derive(Debug, thiserror::Error)]
pub enum StageError {
    #[error(transparent)]
    One(#[from] Stage1Error),
    #[error(transparent)]
    Two(#[from] Stage2Error),
    #[error("invalid schedule: {0}")]
    Config(String),
}

/// A stage failure, carrying everything negotiated before it.
#[derive(Debug, thiserror::Error)]
#[error("pipeline failed during {stage}: {source}")]
pub struct PipelineError {
    pub stage: &'static str,
    #[source]
    pub source: StageError,
    pub messages: Vec<Message>,
    pub stage1: Option<Box<Stage1Result>>,
}

/// Seeded participation draws with the staleness cap. Draw order is one
/// planner after another in index order, one draw per planner per round,
/// so the stream is a pure function of the seed.
struct Roster {
    rng: Option<ChaCha8Rng>,
    skip_probability: f64,
    staleness: usize,
    skips: Vec<usize>,
}

impl Roster {
    fn new(schedule: &Schedule, n: usize) -> Result<Self, StageError> {
        if !(0.0..1.0).contains(&schedule.skip_probability) {
            return Err(StageError::Config(format!(
                "skip probability must lie in [0, 1), got {}",
                schedule.skip_probability
            )));
        }
        let rng = match schedule.mode {
            ScheduleMode::Synchronous => None,
            ScheduleMode::Asynchronous => Some(ChaCha8Rng::seed_from_u64(schedule.seed)),
        };
        Ok(Self {
            rng,
            skip_probability: schedule.skip_probability,
            staleness: schedule.staleness,
            skips: vec![0; n],
        })
    }

    /// Participation mask for the next round. The first round of each
    /// stage is always full so every agent has state on the board.
    fn next_round(&mut self, first: bool) -> Vec<bool> {
        let n = self.skips.len();
        let Some(rng) = self.rng.as_mut() else {
            return vec![true; n];
        };
        let mut mask = vec![true; n];
        for z in 0..n {
            let wants_skip = rng.gen::<f64>() < self.skip_probability;
            if !first && wants_skip && self.skips[z] < self.staleness {
                mask[z] = false;
                self.skips[z] += 1;
            } else {
                self.skips[z] = 0;
            }
        }
        mask
    }
}

struct Bus {
    messages: Vec<Message>,
}

impl Bus {
    fn send(&mut self, round: usize, sender: &str, receiver: &str, payload: Payload) {
        self.messages.push(Message {
            round,
            sender: sender.to_string(),
            receiver: receiver.to_string(),
            payload,
        });
    }
}

/// Runs the full negotiation: announce stage one, rounds to termination,
/// announce stage two over the decided build set, rounds to termination.
/// The message log covers both stages on one bus-round counter.
pub fn run_pipeline(
    net: &Network,
    cfg: &PipelineConfig,
) -> Result<PipelineResult, Box<PipelineError>> {
    let mut bus = Bus { messages: Vec::new() };
    let fail = |stage, source, bus: Bus, s1: Option<Stage1Result>| {
        Box::new(PipelineError { stage, source, messages: bus.messages, stage1: s1.map(Box::new) })
    };

    let mut eng = match Stage1Engine::new(net, cfg.stage1.clone()) {
        Ok(e) => e,
        Err(e) => return Err(fail("stage1", e.into(), bus, None)),
    };
    let mut roster = match Roster::new(&cfg.schedule, eng.n_regions()) {
        Ok(r) => r,
        Err(e) => return Err(fail("stage1", e, bus, None)),
    };

    bus.send(0, COORDINATOR, BROADCAST, Payload::AnnounceStage { stage: 1 });
    let reason = loop {
        let round = eng.begin_round();
        let mask = roster.next_round(round == 1);
        for z in 0..eng.n_regions() {
            if !mask[z] {
                continue;
            }
            let prop = match eng.solve_region(z) {
                Ok(p) => p,
                Err(e) => return Err(fail("stage1", e.into(), bus, None)),
            };
            bus.send(
                round,
                &eng.region_name(z).to_string(),
                COORDINATOR,
                Payload::RegionalProposal(Proposal::Build(prop.clone())),
            );
            eng.ingest_proposal(prop);
        }
        let decision = match eng.solve_tpc() {
            Ok(d) => d,
            Err(e) => return Err(fail("stage1", e.into(), bus, None)),
        };
        bus.send(
            round,
            COORDINATOR,
            BROADCAST,
            Payload::TpcDecision(Decision::Build(decision.clone())),
        );
        eng.ingest_decision(decision);
        if let Err(e) = eng.update_bounds() {
            return Err(fail("stage1", e.into(), bus, None));
        }
        eng.append_trace();
        bus.send(
            round,
            COORDINATOR,
            BROADCAST,
            Payload::BoundReport(Bounds::Gap {
                lb: eng.state.best_lb,
                ub: eng.state.ub,
                gap: eng.state.gap,
            }),
        );
        if let Some(reason) = eng.check_termination() {
            break reason;
        }
        if let Err(e) = eng.update_duals(&mask) {
            return Err(fail("stage1", e.into(), bus, None));
        }
        for z in 0..eng.n_regions() {
            if mask[z] {
                bus.send(
                    round,
                    COORDINATOR,
                    &eng.region_name(z).to_string(),
                    Payload::DualUpdate(Prices::Investment(eng.state.duals[z].clone())),
                );
            }
        }
    };
    let stage1_rounds = eng.state.round;
    let names: Vec<String> = (0..eng.n_regions()).map(|z| eng.region_name(z).to_string()).collect();
    let stage1 = match eng.finish(reason) {
        Ok(r) => r,
        Err(e) => return Err(fail("stage1", e.into(), bus, None)),
    };
    bus.send(
        stage1_rounds,
        COORDINATOR,
        BROADCAST,
        Payload::Terminate { reason: format!("stage1: {reason:?}") },
    );

    bus.send(stage1_rounds, COORDINATOR, BROADCAST, Payload::AnnounceStage { stage: 2 });
    let mut eng2 = match Stage2Engine::new(net, &stage1.u_star, cfg.stage2.clone()) {
        Ok(e) => e,
        Err(e) => return Err(fail("stage2", e.into(), bus, Some(stage1))),
    };
    loop {
        let mask = roster.next_round(eng2.state.sigma == 0);
        if let Err(e) = eng2.run_round_with(&mask) {
            return Err(fail("stage2", e.into(), bus, Some(stage1)));
        }
        let round = stage1_rounds + eng2.state.sigma;
        for (z, name) in names.iter().enumerate() {
            if mask[z] {
                bus.send(
                    round,
                    name,
                    COORDINATOR,
                    Payload::RegionalProposal(Proposal::Beliefs(
                        eng2.state.beliefs.values[z].clone(),
                    )),
                );
            }
        }
        bus.send(
            round,
            COORDINATOR,
            BROADCAST,
            Payload::TpcDecision(Decision::Beliefs(eng2.state.beliefs.clone())),
        );
        bus.send(
            round,
            COORDINATOR,
            BROADCAST,
            Payload::BoundReport(Bounds::Residual {
                residual: eng2.state.residual,
                movement: eng2.state.movement,
                objective: eng2.state.trace.last().map_or(f64::NAN, |r| r.objective),
            }),
        );
        // A settled board only certifies a fixed point when everyone
        // re-solved this round; with absentees, wait for a full round.
        let full = mask.iter().all(|&m| m);
        if (eng2.settled() && full) || eng2.state.sigma >= cfg.stage2.max_iters {
            break;
        }
        for (z, name) in names.iter().enumerate() {
            if mask[z] {
                bus.send(
                    round,
                    COORDINATOR,
                    name,
                    Payload::DualUpdate(Prices::Boundary(eng2.state.duals.values[z].clone())),
                );
            }
        }
    }
    let final_round = stage1_rounds + eng2.state.sigma;
    let settled = eng2.settled();
    let stage2 = match eng2.finish() {
        Ok(r) => r,
        Err(e) => return Err(fail("stage2", e.into(), bus, Some(stage1))),
    };
    bus.send(
        final_round,
        COORDINATOR,
        BROADCAST,
        Payload::Terminate {
            reason: format!("stage2: {}", if settled { "Settled" } else { "RoundLimit" }),
        },
    );
    Ok(PipelineResult { stage1, stage2, messages: bus.messages })
}

/// Serializes the log as JSON lines, one message per line.
pub fn messages_to_jsonl(messages: &[Message]) -> String {
    let mut out = String::new();
    for m in messages {
        out.push_str(&serde_json::to_string(m).expect("message serializes"));
        out.push('\n');
    }
    out
}
