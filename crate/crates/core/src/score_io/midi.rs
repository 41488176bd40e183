//! Standard MIDI File reading and writing (format 0 and 1).
//!
//! Only note events plus tempo and time-signature meta events are kept.
//! Onsets and durations are computed in beats straight from ticks; tempo is
//! recorded but never used to place notes.

use std::collections::{HashMap, VecDeque};

use super::ScoreError;

/// A sounding note, timed in beats (quarter notes).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoteEvent {
    pub pitch: u8,
    pub onset: f64,
    pub duration: f64,
    pub velocity: u8,
}

impl NoteEvent {
    pub fn end(&self) -> f64 {
        self.onset + self.duration
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TempoChange {
    pub tick: u64,
    pub micros_per_quarter: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TimeSignature {
    pub tick: u64,
    pub numerator: u8,
    pub denominator: u8,
}

/// Beat grid information carried alongside the notes.
#[derive(Debug, Clone, PartialEq)]
pub struct BeatGrid {
    pub ticks_per_quarter: u16,
    pub tempo_changes: Vec<TempoChange>,
    pub time_signatures: Vec<TimeSignature>,
    /// Beat position of the last track end.
    pub end_beats: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MidiScore {
    pub notes: Vec<NoteEvent>,
    pub grid: BeatGrid,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, message: impl Into<String>) -> ScoreError {
        ScoreError::Midi {
            offset: self.pos,
            message: message.into(),
        }
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn u8(&mut self) -> Result<u8, ScoreError> {
        let b = *self
            .bytes
            .get(self.pos)
            .ok_or_else(|| self.err("unexpected end of data"))?;
        self.pos += 1;
        Ok(b)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], ScoreError> {
        if self.remaining() < n {
            return Err(self.err(format!("need {n} bytes, {} remain", self.remaining())));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, ScoreError> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn vlq(&mut self) -> Result<u32, ScoreError> {
        let start = self.pos;
        let mut value = 0u32;
        for _ in 0..4 {
            let b = self.u8()?;
            value = (value << 7) | u32::from(b & 0x7f);
            if b & 0x80 == 0 {
                return Ok(value);
            }
        }
        Err(ScoreError::Midi {
            offset: start,
            message: "variable-length quantity longer than 4 bytes".into(),
        })
    }
}

/// Parses a Standard MIDI File into beat-timed notes.
pub fn parse_midi(bytes: &[u8]) -> Result<MidiScore, ScoreError> {
    if bytes.is_empty() {
        return Err(ScoreError::Midi {
            offset: 0,
            message: "empty file".into(),
        });
    }
    let mut r = Reader { bytes, pos: 0 };
    let (id, header) = read_chunk(&mut r, "MThd")?;
    if &id != b"MThd" {
        return Err(ScoreError::Midi {
            offset: 0,
            message: "missing MThd header".into(),
        });
    }
    if header.len() < 6 {
        return Err(ScoreError::Midi {
            offset: 8,
            message: format!("MThd length {} < 6", header.len()),
        });
    }
    let format = u16::from_be_bytes([header[0], header[1]]);
    let ntracks = u16::from_be_bytes([header[2], header[3]]);
    let division = u16::from_be_bytes([header[4], header[5]]);
    if format > 1 {
        return Err(ScoreError::Midi {
            offset: 8,
            message: format!("unsupported SMF format {format}"),
        });
    }
    if division & 0x8000 != 0 || division == 0 {
        return Err(ScoreError::Midi {
            offset: 12,
            message: "SMPTE or zero time division is not supported".into(),
        });
    }
    let tpq = f64::from(division);

    let mut notes = Vec::new();
    let mut tempo_changes = Vec::new();
    let mut time_signatures = Vec::new();
    let mut end_tick = 0u64;
    let mut track_index = 0;
    while r.remaining() > 0 && track_index < ntracks {
        let chunk_start = r.pos;
        let (id, body) = read_chunk(&mut r, &format!("MTrk #{track_index}"))?;
        if &id != b"MTrk" {
            // unknown chunk types are skipped
            continue;
        }
        let track = parse_track(body, chunk_start + 8)?;
        end_tick = end_tick.max(track.end_tick);
        tempo_changes.extend(track.tempos);
        time_signatures.extend(track.signatures);
        for (pitch, velocity, on, off) in track.notes {
            notes.push(NoteEvent {
                pitch,
                onset: on as f64 / tpq,
                duration: (off - on) as f64 / tpq,
                velocity,
            });
        }
        track_index += 1;
    }
    if track_index < ntracks {
        return Err(ScoreError::Midi {
            offset: r.pos,
            message: format!("header declares {ntracks} tracks, found {track_index}"),
        });
    }
    notes.retain(|n| n.duration > 0.0);
    notes.sort_by(|a, b| a.onset.total_cmp(&b.onset).then(a.pitch.cmp(&b.pitch)));
    tempo_changes.sort_by_key(|t| t.tick);
    time_signatures.sort_by_key(|t| t.tick);
    Ok(MidiScore {
        notes,
        grid: BeatGrid {
            ticks_per_quarter: division,
            tempo_changes,
            time_signatures,
            end_beats: end_tick as f64 / tpq,
        },
    })
}

fn read_chunk<'a>(r: &mut Reader<'a>, name: &str) -> Result<([u8; 4], &'a [u8]), ScoreError> {
    let start = r.pos;
    if r.remaining() < 8 {
        return Err(ScoreError::TruncatedChunk {
            chunk: name.to_string(),
            offset: start,
            declared: 8,
            available: r.remaining(),
        });
    }
    let id: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
    let len = r.u32()? as usize;
    if r.remaining() < len {
        return Err(ScoreError::TruncatedChunk {
            chunk: format!("{name} ({})", String::from_utf8_lossy(&id)),
            offset: start,
            declared: len,
            available: r.remaining(),
        });
    }
    Ok((id, r.take(len)?))
}

struct TrackData {
    /// (pitch, velocity, on tick, off tick)
    notes: Vec<(u8, u8, u64, u64)>,
    tempos: Vec<TempoChange>,
    signatures: Vec<TimeSignature>,
    end_tick: u64,
}

fn parse_track(body: &[u8], base_offset: usize) -> Result<TrackData, ScoreError> {
    let mut r = Reader { bytes: body, pos: 0 };
    let rebase = |e: ScoreError| match e {
        ScoreError::Midi { offset, message } => ScoreError::Midi {
            offset: offset + base_offset,
            message,
        },
        other => other,
    };
    let mut tick = 0u64;
    let mut running: Option<u8> = None;
    // open note-ons per (channel, pitch), matched first-in first-out
    let mut open: HashMap<(u8, u8), VecDeque<(u64, u8)>> = HashMap::new();
    let mut data = TrackData {
        notes: Vec::new(),
        tempos: Vec::new(),
        signatures: Vec::new(),
        end_tick: 0,
    };
    while r.remaining() > 0 {
        tick += u64::from(r.vlq().map_err(rebase)?);
        let event_offset = r.pos;
        let first = r.u8().map_err(rebase)?;
        match first {
            0xFF => {
                running = None;
                let kind = r.u8().map_err(rebase)?;
                let len = r.vlq().map_err(rebase)? as usize;
                let payload = r.take(len).map_err(rebase)?;
                match kind {
                    0x51 if len == 3 => data.tempos.push(TempoChange {
                        tick,
                        micros_per_quarter: u32::from_be_bytes([0, payload[0], payload[1], payload[2]]),
                    }),
                    0x58 if len >= 2 => data.signatures.push(TimeSignature {
                        tick,
                        numerator: payload[0],
                        denominator: 1u8.checked_shl(u32::from(payload[1])).unwrap_or(0),
                    }),
                    0x2F => break,
                    _ => {}
                }
            }
            0xF0 | 0xF7 => {
                running = None;
                let len = r.vlq().map_err(rebase)? as usize;
                r.take(len).map_err(rebase)?;
            }
            0xF1..=0xFE => {
                return Err(ScoreError::Midi {
                    offset: base_offset + event_offset,
                    message: format!("system message 0x{first:02X} inside a track"),
                });
            }
            _ => {
                let (status, first_data) = if first & 0x80 != 0 {
                    running = Some(first);
                    (first, r.u8().map_err(rebase)?)
                } else {
                    let status = running.ok_or_else(|| ScoreError::Midi {
                        offset: base_offset + event_offset,
                        message: format!("data byte 0x{first:02X} with no running status"),
                    })?;
                    (status, first)
                };
                let kind = status & 0xF0;
                let channel = status & 0x0F;
                let needs_second = !matches!(kind, 0xC0 | 0xD0);
                let second = if needs_second {
                    Some(r.u8().map_err(rebase)?)
                } else {
                    None
                };
                if first_data & 0x80 != 0 || second.is_some_and(|b| b & 0x80 != 0) {
                    return Err(ScoreError::Midi {
                        offset: base_offset + event_offset,
                        message: "status byte where a data byte was expected".into(),
                    });
                }
                let velocity = second.unwrap_or(0);
                match kind {
                    0x90 if velocity > 0 => open
                        .entry((channel, first_data))
                        .or_default()
                        .push_back((tick, velocity)),
                    0x80 | 0x90 => {
                        if let Some((on, vel)) = open
                            .get_mut(&(channel, first_data))
                            .and_then(VecDeque::pop_front)
                        {
                            data.notes.push((first_data, vel, on, tick));
                        }
                    }
                    _ => {}
                }
            }
        }
    }
    data.end_tick = tick;
    let mut dangling: Vec<_> = open.into_iter().collect();
    dangling.sort_by_key(|((ch, p), _)| (*ch, *p));
    for ((_, pitch), queue) in dangling {
        for (on, vel) in queue {
            data.notes.push((pitch, vel, on, tick));
        }
    }
    Ok(data)
}

fn push_vlq(out: &mut Vec<u8>, mut value: u32) {
    let mut buf = [0u8; 4];
    let mut n = 0;
    loop {
        buf[n] = (value & 0x7f) as u8;
        n += 1;
        value >>= 7;
        if value == 0 {
            break;
        }
    }
    for i in (0..n).rev() {
        out.push(if i > 0 { buf[i] | 0x80 } else { buf[i] });
    }
}

/// Writes a format-0 file with a single tempo (120 bpm) and 4/4 meter.
/// Note times are rounded to the nearest tick.
pub fn write_midi(notes: &[NoteEvent], ticks_per_quarter: u16) -> Vec<u8> {
    let tpq = f64::from(ticks_per_quarter);
    let to_tick = |beats: f64| (beats * tpq).round() as u64;
    // (tick, order, bytes); note-offs sort before note-ons at the same tick
    let mut events: Vec<(u64, u8, [u8; 3])> = Vec::with_capacity(notes.len() * 2);
    for n in notes {
        let on = to_tick(n.onset);
        let off = to_tick(n.end()).max(on + 1);
        events.push((on, 1, [0x90, n.pitch, n.velocity.max(1)]));
        events.push((off, 0, [0x80, n.pitch, 0]));
    }
    events.sort_by_key(|e| (e.0, e.1, e.2[1]));

    let mut track = Vec::new();
    // tempo 500000 us/quarter, time signature 4/4
    track.extend_from_slice(&[0x00, 0xFF, 0x51, 0x03, 0x07, 0xA1, 0x20]);
    track.extend_from_slice(&[0x00, 0xFF, 0x58, 0x04, 0x04, 0x02, 0x18, 0x08]);
    let mut last = 0u64;
    for (tick, _, bytes) in &events {
        push_vlq(&mut track, (tick - last) as u32);
        track.extend_from_slice(bytes);
        last = *tick;
    }
    track.extend_from_slice(&[0x00, 0xFF, 0x2F, 0x00]);

    let mut out = Vec::with_capacity(track.len() + 22);
    out.extend_from_slice(b"MThd");
    out.extend_from_slice(&6u32.to_be_bytes());
    out.extend_from_slice(&0u16.to_be_bytes());
    out.extend_from_slice(&1u16.to_be_bytes());
    out.extend_from_slice(&ticks_per_quarter.to_be_bytes());
    out.extend_from_slice(b"MTrk");
    out.extend_from_slice(&(track.len() as u32).to_be_bytes());
    out.extend_from_slice(&track);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn smf(format: u16, tpq: u16, tracks: &[Vec<u8>]) -> Vec<u8> {
        let mut out = b"MThd".to_vec();
        out.extend_from_slice(&6u32.to_be_bytes());
        out.extend_from_slice(&format.to_be_bytes());
        out.extend_from_slice(&(tracks.len() as u16).to_be_bytes());
        out.extend_from_slice(&tpq.to_be_bytes());
        for t in tracks {
            out.extend_from_slice(b"MTrk");
            out.extend_from_slice(&(t.len() as u32).to_be_bytes());
            out.extend_from_slice(t);
        }
        out
    }

    #[test]
    fn single_note() {
        // delta 0 note-on C4, delta 480 note-off, end of track
        let track = vec![
            0x00, 0x90, 60, 100, 0x83, 0x60, 0x80, 60, 0, 0x00, 0xFF, 0x2F, 0x00,
        ];
        let score = parse_midi(&smf(0, 480, &[track])).unwrap();
        assert_eq!(score.notes.len(), 1);
        let n = score.notes[0];
        assert_eq!((n.pitch, n.onset, n.duration, n.velocity), (60, 0.0, 1.0, 100));
        assert_eq!(score.grid.ticks_per_quarter, 480);
    }

    #[test]
    fn simultaneous_notes_with_running_status() {
        // C4 and E4 on, then both off via note-on velocity 0 under running status
        let track = vec![
            0x00, 0x90, 60, 90, 0x00, 64, 90, 0x87, 0x40, 60, 0, 0x00, 64, 0, 0x00, 0xFF,
            0x2F, 0x00,
        ];
        let score = parse_midi(&smf(0, 480, &[track])).unwrap();
        assert_eq!(score.notes.len(), 2);
        assert_eq!(score.notes[0].onset, score.notes[1].onset);
        assert_eq!(score.notes[0].duration, 2.0);
        assert_eq!(score.notes[1].duration, 2.0);
    }

    #[test]
    fn format1_tempo_track_and_unclosed_note() {
        let tempo = vec![
            0x00, 0xFF, 0x51, 0x03, 0x0F, 0x42, 0x40, 0x00, 0xFF, 0x58, 0x04, 3, 2, 24, 8,
            0x00, 0xFF, 0x2F, 0x00,
        ];
        // note-on at tick 96 never closed; end of track at tick 96+192
        let notes = vec![0x60, 0x91, 48, 70, 0x81, 0x40, 0xFF, 0x2F, 0x00];
        let score = parse_midi(&smf(1, 96, &[tempo, notes])).unwrap();
        assert_eq!(score.grid.tempo_changes[0].micros_per_quarter, 1_000_000);
        assert_eq!(score.grid.time_signatures[0].numerator, 3);
        assert_eq!(score.grid.time_signatures[0].denominator, 4);
        assert_eq!(score.notes.len(), 1);
        assert_eq!(score.notes[0].onset, 1.0);
        assert_eq!(score.notes[0].duration, 2.0);
    }

    #[test]
    fn truncated_chunk_names_chunk() {
        let mut bytes = smf(0, 480, &[vec![0x00, 0xFF, 0x2F, 0x00]]);
        // declare a longer track than present
        let len_at = 14 + 4;
        bytes[len_at..len_at + 4].copy_from_slice(&100u32.to_be_bytes());
        let err = parse_midi(&bytes).unwrap_err();
        match &err {
            ScoreError::TruncatedChunk { chunk, offset, .. } => {
                assert!(chunk.contains("MTrk"), "{chunk}");
                assert_eq!(*offset, 14);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_inputs() {
        assert!(matches!(
            parse_midi(&[]),
            Err(ScoreError::Midi { offset: 0, .. })
        ));
        assert!(parse_midi(b"RIFF\0\0\0\x06abcdef").is_err());
        // data byte with no running status
        let track = vec![0x00, 60, 100, 0x00, 0xFF, 0x2F, 0x00];
        let err = parse_midi(&smf(0, 480, &[track])).unwrap_err();
        assert!(matches!(err, ScoreError::Midi { offset: 23, .. }), "{err:?}");
    }

    #[test]
    fn writer_round_trips() {
        let notes = vec![
            NoteEvent { pitch: 48, onset: 0.0, duration: 2.0, velocity: 80 },
            NoteEvent { pitch: 60, onset: 0.0, duration: 1.0, velocity: 80 },
            NoteEvent { pitch: 60, onset: 1.0, duration: 1.0, velocity: 80 },
            NoteEvent { pitch: 67, onset: 2.5, duration: 0.5, velocity: 64 },
        ];
        let parsed = parse_midi(&write_midi(&notes, 480)).unwrap();
        assert_eq!(parsed.notes, notes);
        assert_eq!(parsed.grid.end_beats, 3.0);
    }

    #[test]
    fn vlq_encoding() {
        for v in [0u32, 127, 128, 8191, 16384, 0x0FFF_FFFF] {
            let mut buf = Vec::new();
            push_vlq(&mut buf, v);
            let mut r = Reader { bytes: &buf, pos: 0 };
            assert_eq!(r.vlq().unwrap(), v);
            assert_eq!(r.remaining(), 0);
        }
    }
}
