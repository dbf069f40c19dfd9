//! One sourcing round: the requester sends a query, the controller broadcasts
//! it, every source scores its own key and reports back, the controller
//! selects, and the selected sources upload.
//!
//! Rounds are single-threaded and fully determined by their inputs and the
//! caller's RNG, which only random selection consumes.

use std::fmt::{self, Write as _};

use rand::Rng;

use crate::channel::{account_upload, achievable_rate, ChannelState, LinkBudget, UploadAccounting};
use crate::embeddings::{
    check_dim, quantize_query, unit_normalize, EmbeddingVector, QuantizationSpec, SampleRecord,
};
use crate::error::{Error, Result};
use crate::matching::{MatchScore, ScoreMode};
use crate::selection::{select, Candidate, SchemeConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct QueryMsg {
    pub query: EmbeddingVector,
    pub spec: QuantizationSpec,
    pub task_descriptor: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Query(QueryMsg),
    ScoreReport {
        source_id: String,
        score: MatchScore,
    },
    SelectCmd {
        source_ids: Vec<String>,
    },
    DataUpload {
        source_id: String,
        sample_id: String,
        contains_target: bool,
    },
    FoundAck {
        source_id: String,
    },
}

impl Message {
    pub fn kind(&self) -> &'static str {
        match self {
            Message::Query(_) => "QUERY",
            Message::ScoreReport { .. } => "SCORE",
            Message::SelectCmd { .. } => "SELECT",
            Message::DataUpload { .. } => "UPLOAD",
            Message::FoundAck { .. } => "FOUND",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Actor {
    Requester,
    Controller,
    Source(String),
}

impl fmt::Display for Actor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Actor::Requester => f.write_str("requester"),
            Actor::Controller => f.write_str("controller"),
            Actor::Source(id) => write!(f, "source:{id}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceEntry {
    /// Protocol step: 1 query, 2 score reports, 3 selection, 4 upload.
    pub step: u8,
    pub actor: Actor,
    pub message: Message,
}

macro_rules! state_machine {
    ($name:ident, $actor:literal, [$($state:ident),+], [$(($from:ident, $to:ident)),+]) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
        pub enum $name {
            #[default]
            $($state),+
        }

        impl $name {
            pub fn name(self) -> &'static str {
                match self { $($name::$state => stringify!($state)),+ }
            }

            pub fn can_transition(self, to: Self) -> bool {
                matches!((self, to), $(($name::$from, $name::$to))|+)
            }

            pub fn transition(&mut self, to: Self) -> Result<()> {
                if !self.can_transition(to) {
                    return Err(Error::IllegalTransition {
                        actor: $actor,
                        from: self.name(),
                        to: to.name(),
                    });
                }
                *self = to;
                Ok(())
            }
        }
    };
}

state_machine!(
    RequesterState,
    "requester",
    [Idle, AwaitingResult, Done],
    [(Idle, AwaitingResult), (AwaitingResult, Done)]
);

state_machine!(
    ControllerState,
    "controller",
    [Idle, Broadcasting, Collecting, Selecting, Forwarding],
    [
        (Idle, Broadcasting),
        (Broadcasting, Collecting),
        (Collecting, Selecting),
        (Selecting, Forwarding),
        (Forwarding, Idle)
    ]
);

state_machine!(
    SourceState,
    "source",
    [Idle, Scoring, Reporting, Uploading],
    [
        (Idle, Scoring),
        (Scoring, Reporting),
        (Reporting, Uploading),
        (Reporting, Idle),
        (Uploading, Idle)
    ]
);

/// What a source puts in its score report.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum SourceBehavior {
    #[default]
    Honest,
    /// Reports this score regardless of its data; its upload still carries
    /// its true key.
    Misreport(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SourceNode {
    pub source_id: String,
    pub record: SampleRecord,
    pub channel: ChannelState,
    pub behavior: SourceBehavior,
}

impl SourceNode {
    pub fn honest(source_id: impl Into<String>, record: SampleRecord, channel: ChannelState) -> Self {
        Self {
            source_id: source_id.into(),
            record,
            channel,
            behavior: SourceBehavior::Honest,
        }
    }
}

impl From<(SampleRecord, ChannelState)> for SourceNode {
    /// The source is named after its sample.
    fn from((record, channel): (SampleRecord, ChannelState)) -> Self {
        Self::honest(record.sample_id.clone(), record, channel)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundParams {
    pub scheme: SchemeConfig,
    pub k: usize,
    pub spec: QuantizationSpec,
    pub budget: LinkBudget,
    pub score_mode: ScoreMode,
    /// Bandwidth used to price each candidate's rate for selection. Fixed
    /// across `k` so that top-k selections stay nested.
    pub candidate_rate_bandwidth_hz: f64,
    /// Minimum score an uploaded key must earn on re-check, capped at the
    /// source's own reported score; `None` disables verification.
    pub verify_threshold: Option<f64>,
    pub task_descriptor: String,
}

impl RoundParams {
    pub fn new(scheme: SchemeConfig, k: usize, spec: QuantizationSpec) -> Self {
        let budget = LinkBudget::default();
        Self {
            scheme,
            k,
            spec,
            candidate_rate_bandwidth_hz: budget.total_bandwidth_hz / 2.0,
            budget,
            score_mode: ScoreMode::Cosine,
            verify_threshold: None,
            task_descriptor: "reid".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundOutcome {
    /// Sources whose uploads were accepted, in selection order.
    pub selected: Vec<String>,
    /// Selected sources whose uploads failed verification.
    pub rejected: Vec<String>,
    /// No accepted upload contains the target.
    pub missing: bool,
    pub accounting: UploadAccounting,
    pub trace: Vec<TraceEntry>,
    pub requester: RequesterState,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Accept,
    Reject,
}

/// Re-scores an uploaded key against the query the controller broadcast.
pub fn verify_source(
    controller_view: &QueryMsg,
    upload_key: &EmbeddingVector,
    threshold: f64,
    mode: ScoreMode,
) -> Result<Verdict> {
    check_dim(controller_view.query.dim(), upload_key.dim())?;
    if threshold == f64::NEG_INFINITY {
        return Ok(Verdict::Accept);
    }
    let score = mode.score(&controller_view.query, upload_key)?;
    Ok(if score.0 >= threshold {
        Verdict::Accept
    } else {
        Verdict::Reject
    })
}

pub fn run_round<R: Rng + ?Sized>(
    query_sample: &SampleRecord,
    sources: &[SourceNode],
    params: &RoundParams,
    rng: &mut R,
) -> Result<RoundOutcome> {
    if sources.is_empty() {
        return Err(Error::invalid("round needs at least one source"));
    }
    if params.k < 1 {
        return Err(Error::invalid("k must be at least 1"));
    }

    let mut requester = RequesterState::Idle;
    let mut controller = ControllerState::Idle;
    let mut source_states = vec![SourceState::Idle; sources.len()];
    let mut trace = Vec::with_capacity(2 * sources.len() + 4);

    // Step 1: service request, broadcast to all sources.
    let query = quantize_query(&unit_normalize(&query_sample.vector)?, &params.spec)?;
    let query_msg = QueryMsg {
        query,
        spec: params.spec,
        task_descriptor: params.task_descriptor.clone(),
    };
    requester.transition(RequesterState::AwaitingResult)?;
    controller.transition(ControllerState::Broadcasting)?;
    trace.push(TraceEntry {
        step: 1,
        actor: Actor::Requester,
        message: Message::Query(query_msg.clone()),
    });

    // Step 2: every source matches its own key and reports.
    controller.transition(ControllerState::Collecting)?;
    let mut keys = Vec::with_capacity(sources.len());
    let mut candidates = Vec::with_capacity(sources.len());
    for (node, state) in sources.iter().zip(source_states.iter_mut()) {
        state.transition(SourceState::Scoring)?;
        let key = unit_normalize(&node.record.vector)?;
        let score = match node.behavior {
            SourceBehavior::Honest => params.score_mode.score(&query_msg.query, &key)?,
            SourceBehavior::Misreport(s) => MatchScore(s),
        };
        state.transition(SourceState::Reporting)?;
        let id = node.source_id.clone();
        trace.push(TraceEntry {
            step: 2,
            actor: Actor::Source(id.clone()),
            message: Message::ScoreReport {
                source_id: id.clone(),
                score,
            },
        });
        let rate = achievable_rate(
            params.candidate_rate_bandwidth_hz,
            params.budget.avg_snr_db,
            node.channel,
        );
        candidates.push(Candidate::new(
            id,
            score.0,
            rate / 1e6,
            node.channel.power_gain(),
        )?);
        keys.push(key);
    }

    // Step 3: selection.
    controller.transition(ControllerState::Selecting)?;
    let chosen = select(&params.scheme, &candidates, params.k, rng)?;
    trace.push(TraceEntry {
        step: 3,
        actor: Actor::Controller,
        message: Message::SelectCmd {
            source_ids: chosen.clone(),
        },
    });
    controller.transition(ControllerState::Forwarding)?;

    // Step 4: uploads, with optional content verification.
    let mut selected = Vec::with_capacity(chosen.len());
    let mut rejected = Vec::new();
    let mut uploads = Vec::with_capacity(chosen.len());
    let mut found = false;
    for id in &chosen {
        let idx = sources
            .iter()
            .position(|s| &s.source_id == id)
            .ok_or_else(|| Error::invalid(format!("selected unknown source {id:?}")))?;
        let node = &sources[idx];
        source_states[idx].transition(SourceState::Uploading)?;
        trace.push(TraceEntry {
            step: 4,
            actor: Actor::Source(id.clone()),
            message: Message::DataUpload {
                source_id: id.clone(),
                sample_id: node.record.sample_id.clone(),
                contains_target: node.record.contains_target,
            },
        });
        // A source is held to the lower of the configured bar and its own
        // report, so an honest report always passes its re-check.
        let verdict = match params.verify_threshold {
            Some(t) => {
                let reported = candidates[idx].semantic_score.0;
                verify_source(&query_msg, &keys[idx], t.min(reported), params.score_mode)?
            }
            None => Verdict::Accept,
        };
        if verdict == Verdict::Reject {
            rejected.push(id.clone());
            continue;
        }
        if node.record.contains_target {
            found = true;
            trace.push(TraceEntry {
                step: 4,
                actor: Actor::Source(id.clone()),
                message: Message::FoundAck {
                    source_id: id.clone(),
                },
            });
        }
        selected.push(id.clone());
        uploads.push((id.clone(), node.channel));
    }
    for state in source_states.iter_mut() {
        state.transition(SourceState::Idle)?;
    }

    let query_bits = params.spec.payload_bits();
    let accounting = if uploads.is_empty() {
        UploadAccounting::query_only(query_bits)
    } else {
        account_upload(&uploads, &params.budget, query_bits)?
    };
    controller.transition(ControllerState::Idle)?;
    requester.transition(RequesterState::Done)?;

    Ok(RoundOutcome {
        selected,
        rejected,
        missing: !found,
        accounting,
        trace,
        requester,
    })
}

/// One line per message: `<step>,<actor>,<kind>,<fields...>`.
pub fn export_trace(trace: &[TraceEntry]) -> String {
    let mut out = String::new();
    for e in trace {
        let _ = write!(out, "{},{},{}", e.step, e.actor, e.message.kind());
        match &e.message {
            Message::Query(q) => {
                let _ = write!(
                    out,
                    ",{},{},{},{}",
                    q.spec.kept_dimensions,
                    q.spec.bits_per_dimension,
                    q.spec.payload_bits(),
                    q.task_descriptor.replace([',', '\n'], "_")
                );
            }
            Message::ScoreReport { source_id, score } => {
                let _ = write!(out, ",{source_id},{}", score.0);
            }
            Message::SelectCmd { source_ids } => {
                let _ = write!(out, ",{}", source_ids.join(";"));
            }
            Message::DataUpload {
                source_id,
                sample_id,
                contains_target,
            } => {
                let _ = write!(out, ",{source_id},{sample_id},{}", u8::from(*contains_target));
            }
            Message::FoundAck { source_id } => {
                let _ = write!(out, ",{source_id}");
            }
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rec(id: &str, v: &[f64], target: bool) -> SampleRecord {
        SampleRecord {
            sample_id: id.into(),
            identity_label: if target { "t".into() } else { id.into() },
            vector: EmbeddingVector::new(v.to_vec()).unwrap(),
            contains_target: target,
        }
    }

    fn node(id: &str, v: &[f64], target: bool, gain: f64) -> SourceNode {
        SourceNode::honest(id, rec(id, v, target), ChannelState::new(gain).unwrap())
    }

    fn world() -> (SampleRecord, Vec<SourceNode>) {
        let q = rec("q", &[1.0, 0.0, 0.0], true);
        let sources = vec![
            node("a", &[0.9, 0.1, 0.0], true, 0.2),
            node("b", &[0.0, 1.0, 0.0], false, 3.0),
            node("c", &[0.1, 0.0, 1.0], false, 1.0),
            node("d", &[1.0, 0.05, 0.0], true, 0.5),
        ];
        (q, sources)
    }

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(5)
    }

    #[test]
    fn state_machines_reject_skips() {
        let mut r = RequesterState::Idle;
        assert!(r.transition(RequesterState::Done).is_err());
        r.transition(RequesterState::AwaitingResult).unwrap();
        r.transition(RequesterState::Done).unwrap();
        assert!(r.transition(RequesterState::Idle).is_err());

        let mut c = ControllerState::Idle;
        assert!(c.transition(ControllerState::Selecting).is_err());
        let mut s = SourceState::Idle;
        assert!(s.transition(SourceState::Uploading).is_err());
    }

    #[test]
    fn bss_round_trace_shape() {
        let (q, sources) = world();
        let params = RoundParams::new(SchemeConfig::Bss, 2, QuantizationSpec::lossless(3));
        let out = run_round(&q, &sources, &params, &mut rng()).unwrap();
        assert_eq!(out.selected, vec!["d", "a"]);
        assert!(!out.missing);
        assert_eq!(out.requester, RequesterState::Done);
        let kinds: Vec<_> = out.trace.iter().map(|e| e.message.kind()).collect();
        assert_eq!(
            kinds,
            ["QUERY", "SCORE", "SCORE", "SCORE", "SCORE", "SELECT", "UPLOAD", "FOUND", "UPLOAD", "FOUND"]
        );
        assert_eq!(out.accounting.uplink_bits, 2_000_000);
        assert_eq!(out.accounting.downlink_bits, 96);
    }

    #[test]
    fn bcs_can_miss() {
        let (q, sources) = world();
        let params = RoundParams::new(SchemeConfig::Bcs, 2, QuantizationSpec::lossless(3));
        let out = run_round(&q, &sources, &params, &mut rng()).unwrap();
        assert_eq!(out.selected, vec!["b", "c"]);
        assert!(out.missing);
        assert!(!out
            .trace
            .iter()
            .any(|e| matches!(e.message, Message::FoundAck { .. })));
    }

    #[test]
    fn exhaustive_k_never_misses_when_target_present() {
        let (q, sources) = world();
        for scheme in SchemeConfig::standard_set() {
            let params = RoundParams::new(scheme, 4, QuantizationSpec::lossless(3));
            assert!(!run_round(&q, &sources, &params, &mut rng()).unwrap().missing);
        }
    }

    #[test]
    fn no_target_always_misses() {
        let (q, mut sources) = world();
        sources.iter_mut().for_each(|s| s.record.contains_target = false);
        for scheme in SchemeConfig::standard_set() {
            for k in 1..=4 {
                let params = RoundParams::new(scheme, k, QuantizationSpec::lossless(3));
                assert!(run_round(&q, &sources, &params, &mut rng()).unwrap().missing);
            }
        }
    }

    #[test]
    fn liar_is_rejected_by_verification() {
        let (q, mut sources) = world();
        sources[1].behavior = SourceBehavior::Misreport(1.0);
        let mut params = RoundParams::new(SchemeConfig::Bss, 1, QuantizationSpec::lossless(3));
        let out = run_round(&q, &sources, &params, &mut rng()).unwrap();
        assert_eq!(out.selected, vec!["b"]);
        assert!(out.missing);

        params.verify_threshold = Some(0.5);
        let out = run_round(&q, &sources, &params, &mut rng()).unwrap();
        assert!(out.selected.is_empty());
        assert_eq!(out.rejected, vec!["b"]);
        assert_eq!(out.accounting.uplink_bits, 0);
        assert_eq!(out.accounting.downlink_bits, 96);
        assert!(out.missing);
    }

    #[test]
    fn verify_examples() {
        let msg = QueryMsg {
            query: EmbeddingVector::new(vec![1.0, 0.0]).unwrap(),
            spec: QuantizationSpec::lossless(2),
            task_descriptor: String::new(),
        };
        let ortho = EmbeddingVector::new(vec![0.0, 1.0]).unwrap();
        let v = |k: &EmbeddingVector, t| verify_source(&msg, k, t, ScoreMode::Cosine).unwrap();
        assert_eq!(v(&ortho, f64::NEG_INFINITY), Verdict::Accept);
        assert_eq!(v(&msg.query, 0.99), Verdict::Accept);
        assert_eq!(v(&ortho, 0.5), Verdict::Reject);
        let wrong = EmbeddingVector::new(vec![0.0, 1.0, 0.0]).unwrap();
        assert!(verify_source(&msg, &wrong, 0.0, ScoreMode::Cosine).is_err());
    }

    #[test]
    fn trace_export_format() {
        let (q, sources) = world();
        let params = RoundParams::new(SchemeConfig::Bss, 1, QuantizationSpec::new(2, 8).unwrap());
        let out = run_round(&q, &sources, &params, &mut rng()).unwrap();
        let text = export_trace(&out.trace);
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "1,requester,QUERY,2,8,16,reid");
        assert!(lines[1].starts_with("2,source:a,SCORE,a,"));
        assert_eq!(lines[5], "3,controller,SELECT,d");
        assert_eq!(lines[6], "4,source:d,UPLOAD,d,d,1");
        assert_eq!(lines[7], "4,source:d,FOUND,d");
    }

    #[test]
    fn round_errors() {
        let (q, sources) = world();
        let params = RoundParams::new(SchemeConfig::Bss, 1, QuantizationSpec::lossless(3));
        assert!(run_round(&q, &[], &params, &mut rng()).is_err());
        let zero_k = RoundParams {
            k: 0,
            ..params.clone()
        };
        assert!(run_round(&q, &sources, &zero_k, &mut rng()).is_err());
        let too_long = RoundParams::new(SchemeConfig::Bss, 1, QuantizationSpec::lossless(4));
        assert!(run_round(&q, &sources, &too_long, &mut rng()).is_err());
    }
}
