//! Time-tag files.
//!
//! Binary layout, little-endian: a 16-byte header (`QTTTAGS1`, u32 version,
//! u32 record count) followed by 16-byte records (i64 picoseconds, u8
//! channel id, 7 reserved zero bytes). The CSV form has the header
//! `channel,picoseconds` with channel names.

use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use thiserror::Error;

use super::write_atomic;
use crate::units::{Channel, Picos, TagStream};

pub const MAGIC: &[u8; 8] = b"QTTTAGS1";
pub const VERSION: u32 = 1;
const RECORD: usize = 16;

#[derive(Debug, Error)]
pub enum TagFileError {
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic, not a tag file")]
    BadMagic,
    #[error("unsupported tag file version {0}")]
    BadVersion(u32),
    #[error("truncated tag file: header promises {expected} records, found {found}")]
    Truncated { expected: u64, found: u64 },
    #[error("record {0}: reserved bytes are not zero")]
    Reserved(u64),
    #[error("record {0}: unknown channel id {1}")]
    BadChannel(u64, u8),
    #[error("{0} tags exceed the record count field")]
    TooMany(usize),
    #[error("line {line}: {message}")]
    Csv { line: usize, message: String },
    #[error("channel {0}: tags are not strictly increasing")]
    Unordered(Channel),
}

fn total(streams: &[&TagStream]) -> Result<u32, TagFileError> {
    let n: usize = streams.iter().map(|s| s.len()).sum();
    u32::try_from(n).map_err(|_| TagFileError::TooMany(n))
}

pub fn encode_binary<W: Write>(w: &mut W, streams: &[&TagStream]) -> Result<(), TagFileError> {
    let n = total(streams)?;
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&n.to_le_bytes())?;
    let mut rec = [0u8; RECORD];
    for s in streams {
        rec[8] = s.channel().id();
        for t in s.tags() {
            rec[..8].copy_from_slice(&t.0.to_le_bytes());
            w.write_all(&rec)?;
        }
    }
    Ok(())
}

/// Groups records by channel, in channel order, keeping empty channels out.
fn collect(mut per: [Vec<Picos>; 4]) -> Result<Vec<TagStream>, TagFileError> {
    let mut out = Vec::new();
    for ch in Channel::ALL {
        let tags = std::mem::take(&mut per[ch.id() as usize]);
        if tags.is_empty() {
            continue;
        }
        out.push(TagStream::new(ch, tags).map_err(|_| TagFileError::Unordered(ch))?);
    }
    Ok(out)
}

pub fn decode_binary<R: Read>(r: &mut R) -> Result<Vec<TagStream>, TagFileError> {
    let mut header = [0u8; 16];
    let got = read_full(r, &mut header)?;
    if got < 8 || &header[..8] != MAGIC {
        return Err(TagFileError::BadMagic);
    }
    if got < 16 {
        return Err(TagFileError::Truncated {
            expected: 0,
            found: 0,
        });
    }
    let version = u32::from_le_bytes(header[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(TagFileError::BadVersion(version));
    }
    let count = u32::from_le_bytes(header[12..16].try_into().unwrap()) as u64;
    let mut per: [Vec<Picos>; 4] = Default::default();
    let mut rec = [0u8; RECORD];
    for i in 0..count {
        if read_full(r, &mut rec)? < RECORD {
            return Err(TagFileError::Truncated {
                expected: count,
                found: i,
            });
        }
        if rec[9..].iter().any(|&b| b != 0) {
            return Err(TagFileError::Reserved(i));
        }
        let ch = Channel::from_id(rec[8]).ok_or(TagFileError::BadChannel(i, rec[8]))?;
        per[ch.id() as usize].push(Picos(i64::from_le_bytes(rec[..8].try_into().unwrap())));
    }
    collect(per)
}

fn read_full<R: Read>(r: &mut R, buf: &mut [u8]) -> std::io::Result<usize> {
    let mut n = 0;
    while n < buf.len() {
        match r.read(&mut buf[n..])? {
            0 => break,
            k => n += k,
        }
    }
    Ok(n)
}

pub fn encode_csv<W: Write>(w: &mut W, streams: &[&TagStream]) -> Result<(), TagFileError> {
    writeln!(w, "channel,picoseconds")?;
    for s in streams {
        let name = s.channel().name();
        for t in s.tags() {
            writeln!(w, "{name},{}", t.0)?;
        }
    }
    Ok(())
}

pub fn decode_csv<R: BufRead>(r: R) -> Result<Vec<TagStream>, TagFileError> {
    let mut per: [Vec<Picos>; 4] = Default::default();
    let mut lines = r.lines();
    match lines.next().transpose()? {
        Some(h) if h.trim() == "channel,picoseconds" => {}
        _ => {
            return Err(TagFileError::Csv {
                line: 1,
                message: "expected header `channel,picoseconds`".into(),
            })
        }
    }
    for (i, line) in lines.enumerate() {
        let line = line?;
        let line_no = i + 2;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |message: String| TagFileError::Csv {
            line: line_no,
            message,
        };
        let (name, ps) = line
            .split_once(',')
            .ok_or_else(|| bad("expected two fields".into()))?;
        let ch = Channel::from_name(name.trim())
            .ok_or_else(|| bad(format!("unknown channel `{name}`")))?;
        let ps: i64 = ps
            .trim()
            .parse()
            .map_err(|e| bad(format!("bad picoseconds `{ps}`: {e}")))?;
        per[ch.id() as usize].push(Picos(ps));
    }
    collect(per)
}

pub fn write_tags(path: &Path, streams: &[&TagStream]) -> Result<(), TagFileError> {
    write_atomic(path, |w| encode_binary(w, streams))
}

pub fn read_tags(path: &Path) -> Result<Vec<TagStream>, TagFileError> {
    decode_binary(&mut BufReader::new(File::open(path)?))
}

pub fn write_tags_csv(path: &Path, streams: &[&TagStream]) -> Result<(), TagFileError> {
    write_atomic(path, |w| encode_csv(w, streams))
}

pub fn read_tags_csv(path: &Path) -> Result<Vec<TagStream>, TagFileError> {
    decode_csv(BufReader::new(File::open(path)?))
}

/// Reads either format, chosen by the file's first bytes.
pub fn read_any(path: &Path) -> Result<Vec<TagStream>, TagFileError> {
    let mut head = [0u8; 8];
    let n = read_full(&mut File::open(path)?, &mut head)?;
    if n == 8 && &head == MAGIC {
        read_tags(path)
    } else {
        read_tags_csv(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_stream(ch: Channel, n: usize, seed: u64) -> TagStream {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = -1_000_000i64;
        let tags = (0..n)
            .map(|_| {
                t += rng.random_range(1..2_000_000);
                Picos(t)
            })
            .collect();
        TagStream::new(ch, tags).unwrap()
    }

    fn encode(streams: &[&TagStream]) -> Vec<u8> {
        let mut buf = Vec::new();
        encode_binary(&mut buf, streams).unwrap();
        buf
    }

    #[test]
    fn million_tags_round_trip_through_a_file() {
        let dir = tempfile::tempdir().unwrap();
        let a = random_stream(Channel::AliceLocal, 600_000, 1);
        let b = random_stream(Channel::AliceReceive, 400_000, 2);
        let path = dir.path().join("alice.tags");
        write_tags(&path, &[&a, &b]).unwrap();
        assert_eq!(std::fs::metadata(&path).unwrap().len(), 16 + 16 * 1_000_000);
        assert_eq!(read_tags(&path).unwrap(), vec![a, b]);
    }

    #[test]
    fn csv_and_binary_agree() {
        let a = random_stream(Channel::BobLocal, 1000, 3);
        let b = random_stream(Channel::BobReceive, 700, 4);
        let mut csv = Vec::new();
        encode_csv(&mut csv, &[&a, &b]).unwrap();
        let from_csv = decode_csv(&csv[..]).unwrap();
        let from_bin = decode_binary(&mut &encode(&[&a, &b])[..]).unwrap();
        assert_eq!(from_csv, from_bin);
        assert_eq!(from_csv, vec![a, b]);
    }

    #[test]
    fn layout_is_little_endian_records() {
        let s = TagStream::new(Channel::BobReceive, vec![Picos(-2), Picos(258)]).unwrap();
        let buf = encode(&[&s]);
        assert_eq!(&buf[..8], b"QTTTAGS1");
        assert_eq!(&buf[8..16], &[1, 0, 0, 0, 2, 0, 0, 0]);
        assert_eq!(&buf[16..24], &(-2i64).to_le_bytes());
        assert_eq!(buf[24], 3);
        assert_eq!(&buf[32..40], &[2, 1, 0, 0, 0, 0, 0, 0]);
        assert_eq!(buf.len(), 48);
    }

    #[test]
    fn malformed_files_are_rejected() {
        let s = random_stream(Channel::AliceLocal, 10, 5);
        let good = encode(&[&s]);

        let mut reserved = good.clone();
        reserved[16 + 16 * 3 + 12] = 1;
        assert!(matches!(
            decode_binary(&mut &reserved[..]),
            Err(TagFileError::Reserved(3))
        ));

        let mut magic = good.clone();
        magic[0] = b'X';
        assert!(matches!(
            decode_binary(&mut &magic[..]),
            Err(TagFileError::BadMagic)
        ));

        let mut version = good.clone();
        version[8] = 2;
        assert!(matches!(
            decode_binary(&mut &version[..]),
            Err(TagFileError::BadVersion(2))
        ));

        let cut = &good[..good.len() - 5];
        assert!(matches!(
            decode_binary(&mut &cut[..]),
            Err(TagFileError::Truncated {
                expected: 10,
                found: 9
            })
        ));

        let mut channel = good.clone();
        channel[16 + 8] = 9;
        assert!(matches!(
            decode_binary(&mut &channel[..]),
            Err(TagFileError::BadChannel(0, 9))
        ));
    }

    #[test]
    fn csv_errors_carry_line_numbers() {
        let text = "channel,picoseconds\nalice_local,5\ncarol,7\n";
        match decode_csv(text.as_bytes()) {
            Err(TagFileError::Csv { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        assert!(decode_csv("".as_bytes()).is_err());
        let unordered = "channel,picoseconds\nalice_local,5\nalice_local,5\n";
        assert!(matches!(
            decode_csv(unordered.as_bytes()),
            Err(TagFileError::Unordered(Channel::AliceLocal))
        ));
    }

    proptest! {
        #[test]
        fn binary_round_trip(raw in proptest::collection::btree_set(any::<i64>(), 0..200), ch in 0u8..4) {
            let ch = Channel::from_id(ch).unwrap();
            let s = TagStream::new(ch, raw.into_iter().map(Picos).collect()).unwrap();
            let back = decode_binary(&mut &encode(&[&s])[..]).unwrap();
            if s.is_empty() {
                prop_assert!(back.is_empty());
            } else {
                prop_assert_eq!(back, vec![s]);
            }
        }
    }
}
