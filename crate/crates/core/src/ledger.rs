//! Activation-memory ledger.
//!
//! Every [`Tensor`](crate::Tensor) reports its allocation and release to the
//! ledger that was active on the constructing thread. While recording, the
//! ledger appends one [`AllocEvent`] per report; the resulting
//! [`MemoryTimeline`] answers live-bytes and peak queries.
//!
//! Events are indexed by a logical sequence counter rather than wall-clock
//! time, so timelines are reproducible run to run.

use std::cell::RefCell;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::sync::{Arc, Mutex, MutexGuard};

use crate::error::{Error, Result};

/// Tag prefix of intermediate forward/backward tensors.
pub const ACTIVATION: &str = "activation:";
/// Tag prefix of parameter gradients.
pub const GRAD: &str = "grad:";
/// Tag prefix of feedback matrices.
pub const FEEDBACK: &str = "feedback:";

pub const CSV_HEADER: &str = "seq,phase,kind,tag,bytes,live_bytes";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Phase {
    Forward,
    Backward,
    LocalForward,
    LocalBackward,
    Update,
    Io,
}

impl Phase {
    pub const ALL: [Phase; 6] = [
        Phase::Forward,
        Phase::Backward,
        Phase::LocalForward,
        Phase::LocalBackward,
        Phase::Update,
        Phase::Io,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Forward => "forward",
            Phase::Backward => "backward",
            Phase::LocalForward => "local-forward",
            Phase::LocalBackward => "local-backward",
            Phase::Update => "update",
            Phase::Io => "io",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Phase::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::UnknownPhase(s.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EventKind {
    Alloc,
    Free,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::Alloc => "alloc",
            EventKind::Free => "free",
        }
    }

    fn sign(self) -> i128 {
        match self {
            EventKind::Alloc => 1,
            EventKind::Free => -1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AllocEvent {
    pub seq: u64,
    pub kind: EventKind,
    pub bytes: u64,
    pub tag: String,
    pub phase: Phase,
}

impl AllocEvent {
    fn delta(&self) -> i128 {
        self.kind.sign() * self.bytes as i128
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MemoryTimeline {
    pub events: Vec<AllocEvent>,
    /// Bytes live when recording started (persistent state: parameters,
    /// feedback matrices, loaded datasets).
    pub baseline_bytes: u64,
}

impl MemoryTimeline {
    pub fn new(baseline_bytes: u64) -> Self {
        MemoryTimeline {
            events: Vec::new(),
            baseline_bytes,
        }
    }

    /// Appends an event. Sequence numbers must strictly increase.
    pub fn record(&mut self, event: AllocEvent) {
        if let Some(last) = self.events.last() {
            assert!(
                event.seq > last.seq,
                "ledger sequence must increase ({} after {})",
                event.seq,
                last.seq
            );
        }
        self.events.push(event);
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    /// Live bytes after each event, baseline included.
    pub fn live_curve(&self) -> Vec<u64> {
        let mut live = self.baseline_bytes as i128;
        self.events
            .iter()
            .map(|e| {
                live += e.delta();
                clamp_bytes(live)
            })
            .collect()
    }

    /// Live bytes after the last event.
    pub fn final_live_bytes(&self) -> u64 {
        let net: i128 = self.events.iter().map(AllocEvent::delta).sum();
        clamp_bytes(self.baseline_bytes as i128 + net)
    }

    /// Baseline plus the largest prefix sum of (alloc − free) over events
    /// whose phase matches `phase_filter`.
    pub fn peak_live_bytes(&self, phase_filter: Option<&str>) -> Result<u64> {
        let above = match phase_filter {
            None => self.peak_where(|_| true),
            Some(name) => {
                let phase: Phase = name.parse()?;
                self.peak_where(|e| e.phase == phase)
            }
        };
        Ok(self.baseline_bytes + above)
    }

    /// Largest prefix sum of (alloc − free) over events accepted by `keep`,
    /// excluding the baseline. The empty prefix counts, so the result is ≥ 0.
    pub fn peak_where(&self, keep: impl Fn(&AllocEvent) -> bool) -> u64 {
        let mut live: i128 = 0;
        let mut peak: i128 = 0;
        for e in self.events.iter().filter(|e| keep(e)) {
            live += e.delta();
            peak = peak.max(live);
        }
        clamp_bytes(peak)
    }

    /// Peak bytes held by tensors whose tag starts with `prefix`.
    pub fn peak_tagged(&self, prefix: &str) -> u64 {
        self.peak_where(|e| e.tag.starts_with(prefix))
    }

    /// Peak bytes of intermediate (`activation:*`) tensors.
    pub fn activation_peak(&self) -> u64 {
        self.peak_tagged(ACTIVATION)
    }

    /// Live `activation:*` bytes after each event.
    pub fn activation_curve(&self) -> Vec<u64> {
        let mut live: i128 = 0;
        self.events
            .iter()
            .map(|e| {
                if e.tag.starts_with(ACTIVATION) {
                    live += e.delta();
                }
                clamp_bytes(live)
            })
            .collect()
    }

    /// Peak and mean live bytes (baseline included) over the events of each
    /// phase that occurs in the timeline.
    pub fn phase_summary(&self) -> Vec<PhaseSummary> {
        let curve = self.live_curve();
        let mut out = Vec::new();
        for phase in Phase::ALL {
            let points: Vec<u64> = self
                .events
                .iter()
                .zip(&curve)
                .filter(|(e, _)| e.phase == phase)
                .map(|(_, &live)| live)
                .collect();
            if points.is_empty() {
                continue;
            }
            let peak = points.iter().copied().max().unwrap_or(0);
            let mean = points.iter().map(|&v| v as f64).sum::<f64>() / points.len() as f64;
            out.push(PhaseSummary {
                phase,
                events: points.len(),
                peak_live_bytes: peak,
                mean_live_bytes: mean,
            });
        }
        out
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "{CSV_HEADER}")?;
        for (e, live) in self.events.iter().zip(self.live_curve()) {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                e.seq,
                e.phase,
                e.kind.as_str(),
                e.tag,
                e.bytes,
                live
            )?;
        }
        Ok(())
    }

    pub fn export_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = std::io::BufWriter::new(file);
        self.write_csv(&mut out)
            .and_then(|_| out.flush())
            .map_err(|e| Error::io(path, e))
    }

    /// Parses the CSV produced by [`write_csv`](Self::write_csv). The baseline
    /// is recovered from the first row; a header-only file has baseline 0.
    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, header)) if header == CSV_HEADER => {}
            Some((_, header)) => {
                return Err(Error::Parse {
                    line: 1,
                    reason: format!("expected header `{CSV_HEADER}`, found `{header}`"),
                })
            }
            None => {
                return Err(Error::Parse {
                    line: 1,
                    reason: "empty file".into(),
                })
            }
        }

        let mut timeline = MemoryTimeline::default();
        let mut expected_live: Option<i128> = None;
        for (idx, line) in lines {
            let line_no = idx + 1;
            let bad = |reason: String| Error::Parse {
                line: line_no,
                reason,
            };
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 6 {
                return Err(bad(format!("expected 6 fields, found {}", fields.len())));
            }
            let int = |s: &str, what: &str| -> Result<u64> {
                s.parse::<u64>()
                    .map_err(|_| bad(format!("invalid {what} `{s}`")))
            };
            let seq = int(fields[0], "seq")?;
            let phase: Phase = fields[1]
                .parse()
                .map_err(|_| bad(format!("unknown phase `{}`", fields[1])))?;
            let kind = match fields[2] {
                "alloc" => EventKind::Alloc,
                "free" => EventKind::Free,
                other => return Err(bad(format!("unknown kind `{other}`"))),
            };
            let bytes = int(fields[4], "bytes")?;
            let live = int(fields[5], "live_bytes")? as i128;
            let event = AllocEvent {
                seq,
                kind,
                bytes,
                tag: fields[3].to_string(),
                phase,
            };
            match expected_live {
                None => {
                    let baseline = live - event.delta();
                    if baseline < 0 {
                        return Err(bad("negative baseline".into()));
                    }
                    timeline.baseline_bytes = baseline as u64;
                }
                Some(prev) if prev + event.delta() != live => {
                    return Err(bad(format!(
                        "live_bytes {live} inconsistent with running total {}",
                        prev + event.delta()
                    )));
                }
                Some(_) => {}
            }
            if timeline.events.last().is_some_and(|last| last.seq >= seq) {
                return Err(bad(format!("sequence {seq} does not increase")));
            }
            expected_live = Some(live);
            timeline.events.push(event);
        }
        Ok(timeline)
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_csv(&text)
    }
}

fn clamp_bytes(v: i128) -> u64 {
    v.clamp(0, u64::MAX as i128) as u64
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhaseSummary {
    pub phase: Phase,
    pub events: usize,
    pub peak_live_bytes: u64,
    pub mean_live_bytes: f64,
}

#[derive(Debug)]
struct State {
    live: u64,
    phase: Phase,
    next_seq: u64,
    recording: Option<MemoryTimeline>,
}

/// Shared sink for allocation reports. Recording is serialized by an
/// internal mutex; tensors keep a handle to the ledger they were created
/// under and report their release there, whichever thread drops them.
#[derive(Debug)]
pub struct Ledger {
    state: Mutex<State>,
}

impl Ledger {
    pub fn new() -> Arc<Ledger> {
        Arc::new(Ledger {
            state: Mutex::new(State {
                live: 0,
                phase: Phase::Io,
                next_seq: 0,
                recording: None,
            }),
        })
    }

    fn lock(&self) -> MutexGuard<'_, State> {
        self.state.lock().unwrap_or_else(|poisoned| poisoned.into_inner())
    }

    pub(crate) fn report(&self, kind: EventKind, bytes: u64, tag: &str) {
        let mut st = self.lock();
        match kind {
            EventKind::Alloc => st.live += bytes,
            EventKind::Free => st.live = st.live.saturating_sub(bytes),
        }
        let phase = st.phase;
        let seq = st.next_seq;
        if let Some(tl) = st.recording.as_mut() {
            tl.record(AllocEvent {
                seq,
                kind,
                bytes,
                tag: tag.to_string(),
                phase,
            });
            st.next_seq += 1;
        }
    }

    pub fn live_bytes(&self) -> u64 {
        self.lock().live
    }

    pub fn phase(&self) -> Phase {
        self.lock().phase
    }

    pub fn set_phase(&self, phase: Phase) {
        self.lock().phase = phase;
    }

    pub fn is_recording(&self) -> bool {
        self.lock().recording.is_some()
    }

    /// Starts a new timeline whose baseline is the current live total.
    pub fn start_recording(&self) {
        let mut st = self.lock();
        st.next_seq = 0;
        st.recording = Some(MemoryTimeline::new(st.live));
    }

    pub fn stop_recording(&self) -> Option<MemoryTimeline> {
        self.lock().recording.take()
    }

    /// Position in the current recording, for [`slice_since`](Self::slice_since).
    pub fn mark(&self) -> Option<Mark> {
        let st = self.lock();
        st.recording.as_ref().map(|tl| Mark {
            index: tl.events.len(),
            live: st.live,
        })
    }

    /// The events recorded after `mark`, with the live total at `mark` as baseline.
    pub fn slice_since(&self, mark: Mark) -> Option<MemoryTimeline> {
        let st = self.lock();
        st.recording.as_ref().map(|tl| MemoryTimeline {
            events: tl.events[mark.index.min(tl.events.len())..].to_vec(),
            baseline_bytes: mark.live,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Mark {
    index: usize,
    live: u64,
}

thread_local! {
    static ACTIVE: RefCell<Option<Arc<Ledger>>> = const { RefCell::new(None) };
}

/// Makes `ledger` the target of tensors constructed on this thread until the
/// guard drops.
pub fn install(ledger: Arc<Ledger>) -> ActiveGuard {
    let previous = ACTIVE.with(|a| a.borrow_mut().replace(ledger));
    ActiveGuard { previous }
}

pub fn active() -> Option<Arc<Ledger>> {
    ACTIVE.with(|a| a.borrow().clone())
}

/// Sets the phase on this thread's active ledger, if any.
pub fn set_phase(phase: Phase) {
    ACTIVE.with(|a| {
        if let Some(l) = a.borrow().as_ref() {
            l.set_phase(phase);
        }
    });
}

#[must_use = "the ledger is uninstalled when the guard drops"]
pub struct ActiveGuard {
    previous: Option<Arc<Ledger>>,
}

impl Drop for ActiveGuard {
    fn drop(&mut self) {
        let previous = self.previous.take();
        ACTIVE.with(|a| *a.borrow_mut() = previous);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(seq: u64, kind: EventKind, bytes: u64, tag: &str, phase: Phase) -> AllocEvent {
        AllocEvent {
            seq,
            kind,
            bytes,
            tag: tag.into(),
            phase,
        }
    }

    #[test]
    fn alloc_then_free_returns_to_baseline() {
        let mut tl = MemoryTimeline::new(1000);
        tl.record(ev(0, EventKind::Alloc, 400, "activation:a", Phase::Forward));
        tl.record(ev(1, EventKind::Free, 400, "activation:a", Phase::Backward));
        assert_eq!(tl.live_curve(), vec![1400, 1000]);
        assert_eq!(tl.final_live_bytes(), 1000);
    }

    #[test]
    fn empty_timeline_peak_is_baseline() {
        let tl = MemoryTimeline::new(321);
        assert_eq!(tl.peak_live_bytes(None).unwrap(), 321);
    }

    #[test]
    fn single_alloc_peak() {
        let mut tl = MemoryTimeline::new(50);
        tl.record(ev(0, EventKind::Alloc, 100, "activation:x", Phase::Forward));
        assert_eq!(tl.peak_live_bytes(None).unwrap(), 150);
    }

    #[test]
    fn sequential_and_nested_peaks() {
        let mut seq = MemoryTimeline::new(0);
        let mut s = 0;
        for _ in 0..5 {
            seq.record(ev(s, EventKind::Alloc, 100, "activation:x", Phase::Forward));
            seq.record(ev(s + 1, EventKind::Free, 100, "activation:x", Phase::Forward));
            s += 2;
        }
        assert_eq!(seq.peak_live_bytes(None).unwrap(), 100);

        let mut nested = MemoryTimeline::new(0);
        for i in 0..5 {
            nested.record(ev(i, EventKind::Alloc, 100, "activation:x", Phase::Forward));
        }
        for i in 5..10 {
            nested.record(ev(i, EventKind::Free, 100, "activation:x", Phase::Backward));
        }
        assert_eq!(nested.peak_live_bytes(None).unwrap(), 500);
        assert_eq!(nested.peak_live_bytes(Some("forward")).unwrap(), 500);
        assert_eq!(nested.peak_live_bytes(Some("backward")).unwrap(), 0);
    }

    #[test]
    fn unknown_phase_is_rejected() {
        let tl = MemoryTimeline::new(0);
        assert!(matches!(
            tl.peak_live_bytes(Some("sideways")),
            Err(Error::UnknownPhase(_))
        ));
    }

    #[test]
    fn tag_filters_split_activation_and_grad() {
        let mut tl = MemoryTimeline::new(0);
        tl.record(ev(0, EventKind::Alloc, 10, "activation:a", Phase::Forward));
        tl.record(ev(1, EventKind::Alloc, 30, "grad:W0", Phase::Backward));
        tl.record(ev(2, EventKind::Free, 10, "activation:a", Phase::Backward));
        tl.record(ev(3, EventKind::Free, 30, "grad:W0", Phase::Update));
        assert_eq!(tl.activation_peak(), 10);
        assert_eq!(tl.peak_tagged(GRAD), 30);
        assert_eq!(tl.peak_live_bytes(None).unwrap(), 40);
    }

    #[test]
    fn csv_layout() {
        let mut tl = MemoryTimeline::new(8);
        tl.record(ev(0, EventKind::Alloc, 4, "activation:a0", Phase::Io));
        tl.record(ev(1, EventKind::Free, 4, "activation:a0", Phase::LocalBackward));
        let mut buf = Vec::new();
        tl.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "seq,phase,kind,tag,bytes,live_bytes\n\
             0,io,alloc,activation:a0,4,12\n\
             1,local-backward,free,activation:a0,4,8\n"
        );
        assert_eq!(MemoryTimeline::parse_csv(&text).unwrap(), tl);
    }

    #[test]
    fn empty_csv_is_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("memory.csv");
        MemoryTimeline::new(0).export_csv(&path).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), format!("{CSV_HEADER}\n"));
        let back = MemoryTimeline::read_csv(&path).unwrap();
        assert!(back.is_empty());
        assert_eq!(back.peak_live_bytes(None).unwrap(), 0);
    }

    #[test]
    fn malformed_csv_rows_are_rejected() {
        let head = format!("{CSV_HEADER}\n");
        for body in [
            "0,forward,alloc,a,4\n",
            "0,forward,grow,a,4,4\n",
            "0,upward,alloc,a,4,4\n",
            "0,forward,alloc,a,4,4\n0,forward,free,a,4,0\n",
            "0,forward,alloc,a,4,4\n1,forward,free,a,4,3\n",
        ] {
            assert!(MemoryTimeline::parse_csv(&format!("{head}{body}")).is_err(), "{body}");
        }
        assert!(MemoryTimeline::parse_csv("seq,kind\n").is_err());
    }

    #[test]
    fn ledger_records_only_while_recording() {
        let ledger = Ledger::new();
        ledger.report(EventKind::Alloc, 16, "weight:W0");
        ledger.start_recording();
        ledger.set_phase(Phase::Forward);
        ledger.report(EventKind::Alloc, 8, "activation:z");
        let mark = ledger.mark().unwrap();
        ledger.report(EventKind::Free, 8, "activation:z");
        let slice = ledger.slice_since(mark).unwrap();
        assert_eq!(slice.baseline_bytes, 24);
        assert_eq!(slice.events.len(), 1);
        let tl = ledger.stop_recording().unwrap();
        assert_eq!(tl.baseline_bytes, 16);
        assert_eq!(tl.events.len(), 2);
        assert_eq!(tl.events[0].phase, Phase::Forward);
        assert_eq!(ledger.live_bytes(), 16);
        assert!(ledger.mark().is_none());
    }

    #[test]
    fn install_restores_previous() {
        assert!(active().is_none());
        let outer = Ledger::new();
        {
            let _g = install(outer.clone());
            let inner = Ledger::new();
            {
                let _g2 = install(inner.clone());
                assert!(Arc::ptr_eq(&active().unwrap(), &inner));
            }
            assert!(Arc::ptr_eq(&active().unwrap(), &outer));
        }
        assert!(active().is_none());
    }
}
