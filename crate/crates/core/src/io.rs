//! Binary trajectory files.
//!
//! A text header terminated by the line `end`, then one block per level:
//! `u64 level | f64 t | p[N] | c[N] | theta[N] | r[N] | u32 crc32`, all
//! little-endian, the checksum covering the block bytes before it. A footer
//! `b"END\0" | u64 level count | u32 crc32` closes a complete file.
//! See docs/formats.md for the full layout.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use crate::discretization::StateFields;
use crate::error::{Error, Result};
use crate::stepper::{LevelSink, StepStats, Trajectory};

pub const MAGIC: &str = "porohydra-trajectory v1";
const FOOTER: &[u8; 4] = b"END\0";

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryHeader {
    pub nodes: usize,
    pub h: f64,
    pub t_final: f64,
    pub halvings: usize,
}

fn write_header<W: Write>(w: &mut W, hd: &TrajectoryHeader) -> Result<()> {
    writeln!(w, "{MAGIC}")?;
    writeln!(w, "nodes {}", hd.nodes)?;
    writeln!(w, "h {:?}", hd.h)?;
    writeln!(w, "t_final {:?}", hd.t_final)?;
    writeln!(w, "halvings {}", hd.halvings)?;
    writeln!(w, "fields p c theta r")?;
    writeln!(w, "end")?;
    Ok(())
}

fn encode_level(state: &StateFields) -> Vec<u8> {
    let n = state.p.len();
    let mut buf = Vec::with_capacity(16 + 32 * n + 4);
    buf.extend_from_slice(&(state.level as u64).to_le_bytes());
    buf.extend_from_slice(&state.t.to_le_bytes());
    for field in [&state.p, &state.c, &state.theta, &state.r] {
        for v in field.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    buf
}

fn encode_footer(count: usize) -> Vec<u8> {
    let mut buf = FOOTER.to_vec();
    buf.extend_from_slice(&(count as u64).to_le_bytes());
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    buf
}

pub fn write_trajectory<W: Write>(mut w: W, traj: &Trajectory) -> Result<()> {
    let nodes = traj.levels.first().map_or(0, |l| l.p.len());
    write_header(
        &mut w,
        &TrajectoryHeader {
            nodes,
            h: traj.h,
            t_final: traj.t_final,
            halvings: traj.halvings,
        },
    )?;
    for level in &traj.levels {
        if level.p.len() != nodes {
            return Err(Error::Integrity("levels have different node counts".into()));
        }
        w.write_all(&encode_level(level))?;
    }
    w.write_all(&encode_footer(traj.levels.len()))?;
    w.flush()?;
    Ok(())
}

pub fn save_trajectory(path: &Path, traj: &Trajectory) -> Result<()> {
    write_trajectory(BufWriter::new(File::create(path)?), traj)
}

fn header_value<'a>(line: &'a str, key: &str) -> Result<&'a str> {
    line.strip_prefix(key)
        .and_then(|s| s.strip_prefix(' '))
        .ok_or_else(|| Error::Integrity(format!("expected header key `{key}`, found `{line}`")))
}

fn parse<T: std::str::FromStr>(s: &str, key: &str) -> Result<T> {
    s.trim().parse().map_err(|_| Error::Integrity(format!("unreadable header value for `{key}`: `{s}`")))
}

fn read_header<R: BufRead>(r: &mut R) -> Result<TrajectoryHeader> {
    let mut lines = Vec::new();
    for _ in 0..7 {
        let mut line = String::new();
        if r.read_line(&mut line)? == 0 {
            return Err(Error::Integrity("truncated header".into()));
        }
        lines.push(line.trim_end_matches('\n').to_string());
    }
    if lines[0] != MAGIC {
        return Err(Error::Integrity(format!("not a trajectory file (first line `{}`)", lines[0])));
    }
    if lines[5] != "fields p c theta r" || lines[6] != "end" {
        return Err(Error::Integrity("unexpected field list or header terminator".into()));
    }
    Ok(TrajectoryHeader {
        nodes: parse(header_value(&lines[1], "nodes")?, "nodes")?,
        h: parse(header_value(&lines[2], "h")?, "h")?,
        t_final: parse(header_value(&lines[3], "t_final")?, "t_final")?,
        halvings: parse(header_value(&lines[4], "halvings")?, "halvings")?,
    })
}

fn f64s(bytes: &[u8]) -> Vec<f64> {
    bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()
}

pub fn read_trajectory<R: Read>(r: R) -> Result<Trajectory> {
    let mut r = BufReader::new(r);
    let hd = read_header(&mut r)?;
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    let n = hd.nodes;
    let block = 16 + 32 * n + 4;
    let mut levels = Vec::new();
    let mut pos = 0;
    loop {
        if rest.len() - pos >= 4 && &rest[pos..pos + 4] == FOOTER && rest.len() - pos == 16 {
            let foot = &rest[pos..];
            let crc = u32::from_le_bytes(foot[12..16].try_into().unwrap());
            if crc32fast::hash(&foot[..12]) != crc {
                return Err(Error::Integrity("footer checksum mismatch".into()));
            }
            let count = u64::from_le_bytes(foot[4..12].try_into().unwrap()) as usize;
            if count != levels.len() {
                return Err(Error::Integrity(format!("footer announces {count} levels, file holds {}", levels.len())));
            }
            break;
        }
        if rest.len() - pos < block {
            return Err(Error::Integrity(format!(
                "file truncated after {} complete levels ({} trailing bytes, no footer)",
                levels.len(),
                rest.len() - pos
            )));
        }
        let b = &rest[pos..pos + block];
        let crc = u32::from_le_bytes(b[block - 4..].try_into().unwrap());
        if crc32fast::hash(&b[..block - 4]) != crc {
            return Err(Error::Integrity(format!("checksum mismatch in level block {}", levels.len())));
        }
        let level = u64::from_le_bytes(b[0..8].try_into().unwrap()) as usize;
        let t = f64::from_le_bytes(b[8..16].try_into().unwrap());
        let body = &b[16..block - 4];
        let field = |k: usize| f64s(&body[8 * n * k..8 * n * (k + 1)]);
        levels.push(StateFields {
            level,
            t,
            p: field(0),
            c: field(1),
            theta: field(2),
            r: field(3),
        });
        pos += block;
    }
    Ok(Trajectory {
        h: hd.h,
        t_final: hd.t_final,
        halvings: hd.halvings,
        levels,
        stats: Vec::new(),
    })
}

pub fn load_trajectory(path: &Path) -> Result<Trajectory> {
    read_trajectory(File::open(path)?)
}

/// Writes levels to disk as they arrive and keeps only the last two in memory.
pub struct StreamingSink {
    path: PathBuf,
    file: BufWriter<File>,
    header: TrajectoryHeader,
    count: usize,
    pub window: Vec<StateFields>,
    pub stats: Vec<StepStats>,
}

impl StreamingSink {
    pub fn create(path: &Path, nodes: usize, h: f64, t_final: f64) -> Result<Self> {
        let header = TrajectoryHeader {
            nodes,
            h,
            t_final,
            halvings: 0,
        };
        let mut file = BufWriter::new(File::create(path)?);
        write_header(&mut file, &header)?;
        Ok(StreamingSink {
            path: path.to_path_buf(),
            file,
            header,
            count: 0,
            window: Vec::new(),
            stats: Vec::new(),
        })
    }

    pub fn levels_written(&self) -> usize {
        self.count
    }

    /// Writes the footer; the file is incomplete (and rejected on reading) until then.
    pub fn finish(mut self) -> Result<PathBuf> {
        self.file.write_all(&encode_footer(self.count))?;
        self.file.flush()?;
        Ok(self.path)
    }
}

impl LevelSink for StreamingSink {
    fn push(&mut self, state: &StateFields, stats: Option<&StepStats>) -> Result<()> {
        if state.p.len() != self.header.nodes {
            return Err(Error::Integrity("level has the wrong node count".into()));
        }
        self.file.write_all(&encode_level(state))?;
        self.count += 1;
        self.window.push(state.clone());
        if self.window.len() > 2 {
            self.window.remove(0);
        }
        if let Some(s) = stats {
            self.stats.push(s.clone());
        }
        Ok(())
    }

    fn reset(&mut self, h: f64) -> Result<()> {
        self.header.h = h;
        self.header.halvings += 1;
        self.file.flush()?;
        let f = self.file.get_mut();
        f.set_len(0)?;
        f.seek(SeekFrom::Start(0))?;
        write_header(&mut self.file, &self.header)?;
        self.count = 0;
        self.window.clear();
        self.stats.clear();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(levels: usize, n: usize) -> Trajectory {
        let levels = (0..levels)
            .map(|l| StateFields {
                level: l,
                t: l as f64 * 0.1,
                p: (0..n).map(|i| -(i as f64) * 0.5 - l as f64).collect(),
                c: (0..n).map(|i| i as f64 * 1e-3).collect(),
                theta: vec![l as f64; n],
                r: vec![0.1 * l as f64; n],
            })
            .collect();
        Trajectory {
            h: 0.1,
            t_final: 0.1 * 3.0,
            halvings: 0,
            levels,
            stats: Vec::new(),
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let t = sample(4, 7);
        let mut buf = Vec::new();
        write_trajectory(&mut buf, &t).unwrap();
        let back = read_trajectory(&buf[..]).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn truncation_and_corruption_are_detected() {
        let t = sample(3, 5);
        let mut buf = Vec::new();
        write_trajectory(&mut buf, &t).unwrap();
        for cut in [buf.len() - 1, buf.len() - 16, buf.len() - 40, 30] {
            let err = read_trajectory(&buf[..cut]).unwrap_err();
            assert!(matches!(err, Error::Integrity(_)), "cut {cut}: {err}");
        }
        let mut bad = buf.clone();
        let k = bad.len() - 60;
        bad[k] ^= 0x10;
        assert!(matches!(read_trajectory(&bad[..]), Err(Error::Integrity(_))));
    }

    #[test]
    fn streaming_sink_matches_batch_writer() {
        let t = sample(5, 3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.traj");
        let mut sink = StreamingSink::create(&path, 3, 0.2, t.t_final).unwrap();
        sink.push(&t.levels[0], None).unwrap();
        sink.reset(0.1).unwrap();
        for l in &t.levels {
            sink.push(l, None).unwrap();
        }
        assert_eq!(sink.window.len(), 2);
        let mut expect = t.clone();
        expect.halvings = 1;
        sink.finish().unwrap();
        let back = load_trajectory(&path).unwrap();
        assert_eq!(back, expect);
        let mut batch = Vec::new();
        write_trajectory(&mut batch, &expect).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), batch);
    }
}
