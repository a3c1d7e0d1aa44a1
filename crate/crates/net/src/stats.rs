use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::endpoint::DelayLogEntry;

pub const BYTES_PER_KB: f64 = 1024.0;

#[derive(Debug, Default, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypeStats {
    pub sent: usize,
    pub completed: usize,
    pub bytes: usize,
    pub mean_rtt: f64,
}

#[derive(Debug, Default, Clone, PartialEq, Serialize, Deserialize)]
pub struct DelayStats {
    /// Entries with a response.
    pub count: usize,
    /// Entries in the log, answered or not.
    pub sent: usize,
    /// Wire bytes over every entry, retransmissions included.
    pub total_bytes: usize,
    /// Seconds, over completed entries.
    pub mean_rtt: f64,
    /// Σ rtt (ms) / Σ size (KB) over completed entries.
    pub ms_per_kb: f64,
    pub per_type: BTreeMap<String, TypeStats>,
}

pub fn compute_stats(log: &[DelayLogEntry]) -> DelayStats {
    let mut s = DelayStats { sent: log.len(), ..Default::default() };
    let mut rtt_sum = 0.0;
    let mut kb_sum = 0.0;
    let mut per_type_rtt: BTreeMap<String, f64> = BTreeMap::new();
    for e in log {
        s.total_bytes += e.size_bytes;
        let t = s.per_type.entry(e.msg_type.name().to_string()).or_default();
        t.sent += 1;
        t.bytes += e.size_bytes;
        if let Some(rtt) = e.rtt() {
            s.count += 1;
            t.completed += 1;
            rtt_sum += rtt;
            kb_sum += e.size_bytes as f64 / BYTES_PER_KB;
            *per_type_rtt.entry(e.msg_type.name().to_string()).or_default() += rtt;
        }
    }
    if s.count > 0 {
        s.mean_rtt = rtt_sum / s.count as f64;
    }
    if kb_sum > 0.0 {
        s.ms_per_kb = rtt_sum * 1000.0 / kb_sum;
    }
    for (name, t) in s.per_type.iter_mut() {
        if t.completed > 0 {
            t.mean_rtt = per_type_rtt[name] / t.completed as f64;
        }
    }
    s
}

pub const DELAY_CSV_HEADER: [&str; 6] = ["datagram_id", "type", "size_bytes", "t_sent", "t_resp", "rtt_ms"];

/// Writes `datagram_id,type,size_bytes,t_sent,t_resp,rtt_ms`; unanswered
/// datagrams leave the last two fields empty.
pub fn write_delay_csv<W: Write>(log: &[DelayLogEntry], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(DELAY_CSV_HEADER)?;
    for e in log {
        let t_resp = e.t_response_received.map(|t| format!("{t:.6}")).unwrap_or_default();
        let rtt = e.rtt().map(|r| format!("{:.3}", r * 1000.0)).unwrap_or_default();
        w.write_record([e.datagram_id.to_string(), e.msg_type.name().to_string(), e.size_bytes.to_string(), format!("{:.6}", e.t_sent), t_resp, rtt])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frame::MsgType;

    fn entry(id: u32, bytes: usize, rtt_ms: Option<f64>) -> DelayLogEntry {
        DelayLogEntry {
            datagram_id: id,
            msg_type: MsgType::MapPoints,
            size_bytes: bytes,
            frame_bytes: bytes,
            transmissions: 1,
            t_sent: 1.0,
            t_response_received: rtt_ms.map(|r| 1.0 + r / 1000.0),
        }
    }

    #[test]
    fn hand_example() {
        let s = compute_stats(&[entry(1, 1024, Some(100.0)), entry(2, 3072, Some(300.0))]);
        assert_eq!(s.count, 2);
        assert_eq!(s.total_bytes, 4096);
        assert!((s.ms_per_kb - 100.0).abs() < 1e-9);
        assert!((s.mean_rtt - 0.2).abs() < 1e-12);
        assert_eq!(s.per_type["MAP_POINTS"].completed, 2);
    }

    #[test]
    fn reference_quotient() {
        let s = compute_stats(&[entry(1, 2048, Some(222.8))]);
        assert!((s.ms_per_kb - 111.4).abs() < 1e-9);
    }

    #[test]
    fn empty_and_unanswered() {
        assert_eq!(compute_stats(&[]), DelayStats::default());
        let s = compute_stats(&[entry(1, 100, None), entry(2, 1024, Some(50.0))]);
        assert_eq!((s.count, s.sent, s.total_bytes), (1, 2, 1124));
        assert!((s.ms_per_kb - 50.0).abs() < 1e-9);
    }

    #[test]
    fn csv_layout() {
        let mut buf = Vec::new();
        write_delay_csv(&[entry(7, 100, Some(12.5)), entry(8, 40, None)], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "datagram_id,type,size_bytes,t_sent,t_resp,rtt_ms");
        assert_eq!(lines[1], "7,MAP_POINTS,100,1.000000,1.012500,12.500");
        assert_eq!(lines[2], "8,MAP_POINTS,40,1.000000,,");
    }
}
