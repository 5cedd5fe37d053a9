use rand::seq::index;

use super::{BatchKey, CommandLabel, EmgIoError, EmgRecording, Event, LabeledWindow};
use crate::seed;

/// The samples of one trigger interval, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub event: Event,
    pub n_channels: usize,
    pub data: Vec<f32>,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.event.len()
    }

    pub fn is_empty(&self) -> bool {
        self.event.is_empty()
    }
}

pub trait HasLabel {
    fn label(&self) -> CommandLabel;
}

impl HasLabel for Segment {
    fn label(&self) -> CommandLabel {
        self.event.label
    }
}

/// Window length in samples: `round(window_ms * fs_hz / 1000)`.
pub fn window_samples(window_ms: u32, fs_hz: u32) -> usize {
    (u64::from(window_ms) * u64::from(fs_hz) + 500) as usize / 1000
}

/// Cuts one segment per event, `[onset_sample, end_sample)` on every channel.
pub fn segment(rec: &EmgRecording) -> Vec<Segment> {
    let n_ch = rec.n_channels as usize;
    rec.events
        .iter()
        .map(|ev| {
            let mut data = Vec::with_capacity(n_ch * ev.len());
            for k in 0..n_ch {
                data.extend_from_slice(&rec.channel(k)[ev.onset_sample..ev.end_sample]);
            }
            Segment { event: *ev, n_channels: n_ch, data }
        })
        .collect()
}

/// Takes the first `round(window_ms * fs / 1000)` samples of a segment.
pub fn extract_window(seg: &Segment, window_ms: u32, fs_hz: u32, meta: BatchKey) -> Result<LabeledWindow, EmgIoError> {
    let w = window_samples(window_ms, fs_hz);
    let len = seg.len();
    if len < w || w == 0 {
        return Err(EmgIoError::SegmentTooShort { len, needed: w });
    }
    let mut data = Vec::with_capacity(seg.n_channels * w);
    for k in 0..seg.n_channels {
        data.extend_from_slice(&seg.data[k * len..k * len + w]);
    }
    Ok(LabeledWindow { data, n_channels: seg.n_channels, len: w, label: seg.event.label, meta })
}

/// Randomly downsamples the rest class to the largest per-command count.
///
/// Rest items are drawn uniformly without replacement; every other item and
/// the relative order of all retained items are kept.
pub fn balance_rest<T: HasLabel>(items: Vec<T>, seed: u64) -> Result<Vec<T>, EmgIoError> {
    let mut counts = [0usize; 9];
    for it in &items {
        counts[it.label().id()] += 1;
    }
    let target = counts[..8].iter().copied().max().unwrap_or(0);
    let available = counts[CommandLabel::Rest.id()];
    if available < target {
        return Err(EmgIoError::InsufficientRest { available, needed: target });
    }
    if available == target {
        return Ok(items);
    }
    let mut rng = seed::rng(seed, "balance_rest");
    let mut keep = vec![false; available];
    for i in index::sample(&mut rng, available, target) {
        keep[i] = true;
    }
    let mut rest_idx = 0;
    Ok(items
        .into_iter()
        .filter(|it| {
            if it.label().is_rest() {
                rest_idx += 1;
                keep[rest_idx - 1]
            } else {
                true
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::emgio::Condition;

    fn key() -> BatchKey {
        BatchKey { subject: 1, session: 1, batch: 1, condition: Condition::Vocalized }
    }

    fn rec_with(events: Vec<Event>, n: usize) -> EmgRecording {
        let samples = (0..14 * n).map(|i| i as f32).collect();
        EmgRecording::new(500, 14, 0.0, samples, events).unwrap()
    }

    fn ev(onset: usize, end: usize, label: CommandLabel) -> Event {
        Event { onset_sample: onset, end_sample: end, label, condition: Condition::Vocalized }
    }

    #[test]
    fn segments_follow_events() {
        let rec = rec_with(vec![ev(1000, 2000, CommandLabel::Up)], 3000);
        let segs = segment(&rec);
        assert_eq!(segs.len(), 1);
        assert_eq!(segs[0].len(), 1000);
        assert_eq!(segs[0].label(), CommandLabel::Up);
        assert_eq!(segs[0].data[0], 1000.0);
        assert_eq!(segs[0].data[1000], 4000.0);
        assert!(segment(&rec_with(vec![], 10)).is_empty());

        let events: Vec<Event> =
            CommandLabel::ALL.iter().enumerate().map(|(i, &l)| ev(i * 10, i * 10 + 7, l)).collect();
        let segs = segment(&rec_with(events, 100));
        assert_eq!(segs.iter().map(|s| s.label()).collect::<Vec<_>>(), CommandLabel::ALL.to_vec());
        assert!(segs.iter().all(|s| s.data.len() == 14 * 7));
    }

    #[test]
    fn windows_anchor_at_onset() {
        let rec = rec_with(vec![ev(1000, 2000, CommandLabel::Up)], 3000);
        let seg = &segment(&rec)[0];
        let w = extract_window(seg, 800, 500, key()).unwrap();
        assert_eq!((w.n_channels, w.len), (14, 400));
        assert_eq!(w.channel(0)[0], 1000.0);
        assert_eq!(w.channel(13)[399], (13 * 3000 + 1399) as f32);
        assert_eq!(window_samples(1400, 500), 700);

        let short = &segment(&rec_with(vec![ev(0, 300, CommandLabel::Up)], 400))[0];
        assert!(matches!(
            extract_window(short, 800, 500, key()),
            Err(EmgIoError::SegmentTooShort { len: 300, needed: 400 })
        ));
    }

    #[derive(Debug, Clone, PartialEq)]
    struct Item(CommandLabel, usize);
    impl HasLabel for Item {
        fn label(&self) -> CommandLabel {
            self.0
        }
    }

    fn pool(per_cmd: usize, rest: usize) -> Vec<Item> {
        let mut v = Vec::new();
        let mut n = 0;
        for _ in 0..per_cmd {
            for l in CommandLabel::COMMANDS {
                v.push(Item(l, n));
                n += 1;
            }
        }
        for _ in 0..rest {
            v.push(Item(CommandLabel::Rest, n));
            n += 1;
        }
        v
    }

    #[test]
    fn rest_is_downsampled_to_command_count() {
        let out = balance_rest(pool(300, 2400), 11).unwrap();
        let mut counts = [0; 9];
        out.iter().for_each(|i| counts[i.0.id()] += 1);
        assert_eq!(counts, [300; 9]);
        assert_eq!(out, balance_rest(pool(300, 2400), 11).unwrap());
        assert_ne!(out, balance_rest(pool(300, 2400), 12).unwrap());
        // non-rest items keep their order
        assert!(out.windows(2).all(|w| w[0].1 < w[1].1));
    }

    #[test]
    fn balanced_input_is_identity() {
        assert_eq!(balance_rest(pool(5, 5), 1).unwrap(), pool(5, 5));
    }

    #[test]
    fn insufficient_rest() {
        assert!(matches!(balance_rest(pool(5, 3), 1), Err(EmgIoError::InsufficientRest { available: 3, needed: 5 })));
    }
}
