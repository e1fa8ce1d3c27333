//! Cooperative Control Message (CCM) wire format.
//!
//! ```text
//! [minute_of_hour u8][ms_of_minute u16 LE][ego_id u8]
//! per conflict: [neighbor_id u8][N x f32 LE]
//! ```
//!
//! The horizon `N` is not carried in the message; both sides must agree on
//! it. A message with `C` conflicts is `4 + C (1 + 4N)` bytes long.

use serde::{Deserialize, Serialize, Serializer};
use thiserror::Error;

use crate::localization::Wgs84Pose;

pub const HEADER_LEN: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CcmError {
    #[error("timestamp out of range: minute {minute}, ms {ms}")]
    Timestamp { minute: u8, ms: u16 },
    #[error("{len} bytes is not a valid message length for N = {n}")]
    Length { len: usize, n: usize },
    #[error("neighbor {neighbor_id}: expected {expected} distances, got {got}")]
    ConflictLength {
        neighbor_id: u8,
        expected: usize,
        got: usize,
    },
    #[error("neighbor {neighbor_id}: distance {index} is not finite")]
    NonFinite { neighbor_id: u8, index: usize },
    #[error("neighbor id {0} appears twice")]
    DuplicateId(u8),
    #[error("horizon must be at least 1")]
    ZeroHorizon,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CcmConflict {
    pub neighbor_id: u8,
    /// Distances to the joint collision point for steps `k+2 .. k+N+1`.
    /// Serialized as the exact `f64` value of each `f32`.
    #[serde(serialize_with = "widen")]
    pub d_seq: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CcmMessage {
    pub minute_of_hour: u8,
    pub ms_of_minute: u16,
    pub ego_id: u8,
    pub conflicts: Vec<CcmConflict>,
}

impl CcmMessage {
    /// Split a time in seconds into (minute of hour, millisecond of minute).
    pub fn timestamp_from_seconds(t: f64) -> (u8, u16) {
        let ms_total = (t * 1000.0).round().max(0.0) as u64 % 3_600_000;
        ((ms_total / 60_000) as u8, (ms_total % 60_000) as u16)
    }

    pub fn encoded_len(conflicts: usize, n: usize) -> usize {
        HEADER_LEN + conflicts * (1 + 4 * n)
    }

    pub fn distances_for(&self, ego_id: u8) -> Option<&[f32]> {
        self.conflicts
            .iter()
            .find(|c| c.neighbor_id == ego_id)
            .map(|c| c.d_seq.as_slice())
    }

    fn check(&self, n: usize) -> Result<(), CcmError> {
        if n == 0 {
            return Err(CcmError::ZeroHorizon);
        }
        if self.minute_of_hour > 59 || self.ms_of_minute > 59_999 {
            return Err(CcmError::Timestamp {
                minute: self.minute_of_hour,
                ms: self.ms_of_minute,
            });
        }
        let mut seen = [false; 256];
        for c in &self.conflicts {
            if std::mem::replace(&mut seen[c.neighbor_id as usize], true) {
                return Err(CcmError::DuplicateId(c.neighbor_id));
            }
            if c.d_seq.len() != n {
                return Err(CcmError::ConflictLength {
                    neighbor_id: c.neighbor_id,
                    expected: n,
                    got: c.d_seq.len(),
                });
            }
            if let Some(index) = c.d_seq.iter().position(|d| !d.is_finite()) {
                return Err(CcmError::NonFinite {
                    neighbor_id: c.neighbor_id,
                    index,
                });
            }
        }
        Ok(())
    }
}

fn widen<S: Serializer>(d: &[f32], s: S) -> Result<S::Ok, S::Error> {
    s.collect_seq(d.iter().map(|x| f64::from(*x)))
}

pub fn encode_ccm(m: &CcmMessage, n: usize) -> Result<Vec<u8>, CcmError> {
    m.check(n)?;
    let mut out = Vec::with_capacity(CcmMessage::encoded_len(m.conflicts.len(), n));
    out.push(m.minute_of_hour);
    out.extend_from_slice(&m.ms_of_minute.to_le_bytes());
    out.push(m.ego_id);
    for c in &m.conflicts {
        out.push(c.neighbor_id);
        for d in &c.d_seq {
            out.extend_from_slice(&d.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_ccm(bytes: &[u8], n: usize) -> Result<CcmMessage, CcmError> {
    if n == 0 {
        return Err(CcmError::ZeroHorizon);
    }
    let block = 1 + 4 * n;
    if bytes.len() < HEADER_LEN || !(bytes.len() - HEADER_LEN).is_multiple_of(block) {
        return Err(CcmError::Length {
            len: bytes.len(),
            n,
        });
    }
    let msg = CcmMessage {
        minute_of_hour: bytes[0],
        ms_of_minute: u16::from_le_bytes([bytes[1], bytes[2]]),
        ego_id: bytes[3],
        conflicts: bytes[HEADER_LEN..]
            .chunks_exact(block)
            .map(|chunk| CcmConflict {
                neighbor_id: chunk[0],
                d_seq: chunk[1..]
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                    .collect(),
            })
            .collect(),
    };
    msg.check(n)?;
    Ok(msg)
}

/// Minimal stand-in for a cooperative awareness message: who, when, where.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RvPoseRecord {
    pub sender_id: u8,
    pub timestamp: f64,
    pub pose: Wgs84Pose,
    pub speed: f64,
}

impl RvPoseRecord {
    pub fn is_finite(&self) -> bool {
        self.timestamp.is_finite()
            && self.pose.lat.is_finite()
            && self.pose.lon.is_finite()
            && self.pose.alt.is_finite()
            && self.pose.heading.is_finite()
            && self.speed.is_finite()
    }
}

/// A named message with its encoding, for interop checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CcmVector {
    pub name: String,
    pub n: usize,
    pub hex: String,
    pub message: CcmMessage,
}

fn vector(name: &str, n: usize, message: CcmMessage) -> CcmVector {
    let bytes = encode_ccm(&message, n).expect("reference messages are valid");
    CcmVector {
        name: name.to_string(),
        n,
        hex: hex::encode(bytes),
        message,
    }
}

/// Reference vectors: header-only, extreme timestamp, a Scenario 1 style
/// N = 20 message, two conflicts and a signed zero.
#[allow(clippy::approx_constant)]
pub fn reference_vectors() -> Vec<CcmVector> {
    let header = |minute_of_hour, ms_of_minute, ego_id, conflicts| CcmMessage {
        minute_of_hour,
        ms_of_minute,
        ego_id,
        conflicts,
    };
    vec![
        vector("header_only", 20, header(0, 0, 1, vec![])),
        vector("max_timestamp", 20, header(59, 59_999, 255, vec![])),
        vector(
            "scenario1_agent2_to_agent1",
            20,
            header(
                0,
                200,
                2,
                vec![CcmConflict {
                    neighbor_id: 1,
                    d_seq: (0..20).map(|j| 60.8 - 2.0 * j as f32).collect(),
                }],
            ),
        ),
        vector(
            "two_conflicts_n5",
            5,
            header(
                7,
                12_345,
                3,
                vec![
                    CcmConflict {
                        neighbor_id: 1,
                        d_seq: vec![0.0, 0.5, 1.25, 15.0, 0.001],
                    },
                    CcmConflict {
                        neighbor_id: 4,
                        d_seq: vec![100.0, 99.5, 3.14159, 2.71828, 0.1],
                    },
                ],
            ),
        ),
        vector(
            "n1_negative_zero",
            1,
            header(
                30,
                30_000,
                9,
                vec![CcmConflict {
                    neighbor_id: 8,
                    d_seq: vec![-0.0],
                }],
            ),
        ),
    ]
}

/// [`reference_vectors`] as pretty JSON with a trailing newline.
pub fn reference_vectors_json() -> String {
    serde_json::to_string_pretty(&reference_vectors()).expect("vectors serialize") + "\n"
}

#[cfg(test)]
mod tests {
    use super::*;

    fn msg(conflicts: usize, n: usize) -> CcmMessage {
        CcmMessage {
            minute_of_hour: 12,
            ms_of_minute: 34_567,
            ego_id: 1,
            conflicts: (0..conflicts)
                .map(|c| CcmConflict {
                    neighbor_id: c as u8 + 2,
                    d_seq: (0..n).map(|j| j as f32 * 1.5).collect(),
                })
                .collect(),
        }
    }

    #[test]
    fn sizes() {
        assert_eq!(encode_ccm(&msg(1, 20), 20).unwrap().len(), 85);
        assert_eq!(encode_ccm(&msg(0, 20), 20).unwrap().len(), 4);
        assert_eq!(encode_ccm(&msg(3, 7), 7).unwrap().len(), 4 + 3 * 29);
    }

    #[test]
    fn header_layout() {
        let b = encode_ccm(&msg(0, 20), 20).unwrap();
        assert_eq!(b, vec![12, 0x07, 0x87, 1]);
        let m = decode_ccm(&b, 20).unwrap();
        assert!(m.conflicts.is_empty());
    }

    #[test]
    fn timestamp_bounds() {
        let mut m = msg(0, 3);
        m.ms_of_minute = 60_000;
        assert!(matches!(encode_ccm(&m, 3), Err(CcmError::Timestamp { .. })));
        m.ms_of_minute = 0;
        m.minute_of_hour = 60;
        assert!(matches!(encode_ccm(&m, 3), Err(CcmError::Timestamp { .. })));
        assert_eq!(CcmMessage::timestamp_from_seconds(3725.5), (2, 5_500));
        assert_eq!(CcmMessage::timestamp_from_seconds(0.2), (0, 200));
    }

    #[test]
    fn truncated_and_nan() {
        let b = encode_ccm(&msg(1, 20), 20).unwrap();
        assert!(matches!(
            decode_ccm(&b[..84], 20),
            Err(CcmError::Length { .. })
        ));
        assert!(matches!(
            decode_ccm(&b[..3], 20),
            Err(CcmError::Length { .. })
        ));
        let mut bad = b.clone();
        bad[5..9].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(
            decode_ccm(&bad, 20),
            Err(CcmError::NonFinite {
                neighbor_id: 2,
                index: 0
            })
        ));
        let mut m = msg(1, 20);
        m.conflicts[0].d_seq[3] = f32::INFINITY;
        assert!(matches!(
            encode_ccm(&m, 20),
            Err(CcmError::NonFinite { .. })
        ));
    }

    #[test]
    fn duplicate_and_length_errors() {
        let mut m = msg(2, 4);
        m.conflicts[1].neighbor_id = m.conflicts[0].neighbor_id;
        assert_eq!(encode_ccm(&m, 4), Err(CcmError::DuplicateId(2)));
        let m = msg(1, 4);
        assert!(matches!(
            encode_ccm(&m, 5),
            Err(CcmError::ConflictLength { .. })
        ));
        assert_eq!(encode_ccm(&m, 0), Err(CcmError::ZeroHorizon));
    }

    #[test]
    fn lookup() {
        let m = msg(2, 3);
        assert_eq!(m.distances_for(3).unwrap(), &[0.0, 1.5, 3.0]);
        assert!(m.distances_for(1).is_none());
    }
}
