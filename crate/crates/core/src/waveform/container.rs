//! Little-endian binary container for shot batches.
//!
//! ```text
//! header  magic "PNRSHOT\0"  8 bytes
//!         version            u16
//!         reserved           u16 (zero)
//!         record_length      u32
//!         sample_rate        f64
//!         t0, dt             f64, f64
//!         mean_photon_number f64
//!         params_digest      32 bytes
//!         config_digest      32 bytes
//!         record_count       u64
//! record  n, m               u32, u32
//!         samples            record_length × f32
//! ```

use std::io::{Read, Write};

use super::{Shot, Waveform};
use crate::digest::Digest32;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"PNRSHOT\0";
pub const CONTAINER_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct ContainerHeader {
    pub record_length: usize,
    pub sample_rate: f64,
    pub t0: f64,
    pub dt: f64,
    pub mean_photon_number: f64,
    pub params_digest: Digest32,
    pub config_digest: Digest32,
    pub record_count: u64,
}

pub fn write_container<W: Write>(mut w: W, header: &ContainerHeader, shots: &[Shot]) -> Result<()> {
    if header.record_count != shots.len() as u64 {
        return Err(Error::Container(format!(
            "header declares {} records but {} shots were given",
            header.record_count,
            shots.len()
        )));
    }
    let record_length =
        u32::try_from(header.record_length).map_err(|_| Error::Container("record length exceeds u32".into()))?;

    let mut buf = Vec::with_capacity(128);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
    buf.extend_from_slice(&0u16.to_le_bytes());
    buf.extend_from_slice(&record_length.to_le_bytes());
    for v in [header.sample_rate, header.t0, header.dt, header.mean_photon_number] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend_from_slice(&header.params_digest);
    buf.extend_from_slice(&header.config_digest);
    buf.extend_from_slice(&header.record_count.to_le_bytes());
    w.write_all(&buf)?;

    for (i, shot) in shots.iter().enumerate() {
        let samples = shot.waveform.samples();
        if samples.len() != header.record_length {
            return Err(Error::Container(format!(
                "shot {i} has {} samples, expected {}",
                samples.len(),
                header.record_length
            )));
        }
        buf.clear();
        buf.extend_from_slice(&shot.true_incident_photons.to_le_bytes());
        buf.extend_from_slice(&shot.true_detected_photons.to_le_bytes());
        for &s in samples {
            buf.extend_from_slice(&(s as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

fn take<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Container("truncated container".into()),
        _ => Error::Io(e),
    })?;
    Ok(b)
}

fn f64_le(r: &mut impl Read) -> Result<f64> {
    Ok(f64::from_le_bytes(take(r)?))
}

pub fn read_container<R: Read>(mut r: R) -> Result<(ContainerHeader, Vec<Shot>)> {
    if &take::<8>(&mut r)? != MAGIC {
        return Err(Error::Container("bad magic".into()));
    }
    let version = u16::from_le_bytes(take(&mut r)?);
    if version != CONTAINER_VERSION {
        return Err(Error::Container(format!("unsupported version {version}")));
    }
    let _reserved = take::<2>(&mut r)?;
    let record_length = u32::from_le_bytes(take(&mut r)?) as usize;
    let sample_rate = f64_le(&mut r)?;
    let t0 = f64_le(&mut r)?;
    let dt = f64_le(&mut r)?;
    let mean_photon_number = f64_le(&mut r)?;
    let params_digest = take::<32>(&mut r)?;
    let config_digest = take::<32>(&mut r)?;
    let record_count = u64::from_le_bytes(take(&mut r)?);
    if record_length == 0 {
        return Err(Error::Container("zero record length".into()));
    }

    let header = ContainerHeader {
        record_length,
        sample_rate,
        t0,
        dt,
        mean_photon_number,
        params_digest,
        config_digest,
        record_count,
    };

    let mut record = vec![0u8; 8 + 4 * record_length];
    let mut shots = Vec::with_capacity(record_count.min(1 << 20) as usize);
    for _ in 0..record_count {
        r.read_exact(&mut record).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => Error::Container("truncated record".into()),
            _ => Error::Io(e),
        })?;
        let n = u32::from_le_bytes(record[0..4].try_into().unwrap());
        let m = u32::from_le_bytes(record[4..8].try_into().unwrap());
        let samples = record[8..]
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
            .collect();
        shots.push(Shot {
            true_incident_photons: n,
            true_detected_photons: m,
            waveform: Waveform::new(samples, dt, t0)?,
        });
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Container("trailing bytes after last record".into()));
    }
    Ok((header, shots))
}

/// One shot per row: `shot,n,m,v0,v1,…`.
pub fn shots_to_csv(shots: &[Shot]) -> String {
    let width = shots.first().map_or(0, |s| s.waveform.len());
    let mut out = String::from("shot,n,m");
    for i in 0..width {
        out.push_str(&format!(",v{i}"));
    }
    out.push('\n');
    for (i, s) in shots.iter().enumerate() {
        out.push_str(&format!("{i},{},{}", s.true_incident_photons, s.true_detected_photons));
        for v in s.waveform.samples() {
            out.push_str(&format!(",{v:e}"));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::povm::CoherentProbe;
    use crate::waveform::{run_experiment, DetectorParams};

    fn batch() -> (ContainerHeader, Vec<Shot>) {
        let p = DetectorParams {
            record_length: 64,
            ..DetectorParams::default()
        };
        let shots = run_experiment(CoherentProbe::new(2.0).unwrap(), 10, &p, 1).unwrap();
        let header = ContainerHeader {
            record_length: 64,
            sample_rate: p.sample_rate,
            t0: 0.0,
            dt: p.dt(),
            mean_photon_number: 2.0,
            params_digest: p.digest().unwrap(),
            config_digest: [7; 32],
            record_count: 10,
        };
        (header, shots)
    }

    #[test]
    fn round_trip() {
        let (header, shots) = batch();
        let mut bytes = Vec::new();
        write_container(&mut bytes, &header, &shots).unwrap();
        assert_eq!(bytes.len(), 120 + 10 * (8 + 4 * 64));
        assert_eq!(&bytes[..8], b"PNRSHOT\0");

        let (h, back) = read_container(bytes.as_slice()).unwrap();
        assert_eq!(h, header);
        assert_eq!(back.len(), 10);
        for (a, b) in shots.iter().zip(&back) {
            assert_eq!(a.true_detected_photons, b.true_detected_photons);
            assert_eq!(a.true_incident_photons, b.true_incident_photons);
            for (x, y) in a.waveform.samples().iter().zip(b.waveform.samples()) {
                assert_eq!(*x as f32 as f64, *y);
            }
        }
    }

    #[test]
    fn little_endian_layout() {
        let (header, shots) = batch();
        let mut bytes = Vec::new();
        write_container(&mut bytes, &header, &shots).unwrap();
        assert_eq!(&bytes[8..10], &[1, 0]);
        assert_eq!(&bytes[12..16], &[64, 0, 0, 0]);
        assert_eq!(&bytes[112..120], &10u64.to_le_bytes());
        let first = &bytes[120..];
        assert_eq!(
            u32::from_le_bytes(first[4..8].try_into().unwrap()),
            shots[0].true_detected_photons
        );
    }

    #[test]
    fn rejects_corruption() {
        let (header, shots) = batch();
        let mut bytes = Vec::new();
        write_container(&mut bytes, &header, &shots).unwrap();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(read_container(bad.as_slice()), Err(Error::Container(_))));

        let truncated = &bytes[..bytes.len() - 3];
        assert!(matches!(read_container(truncated), Err(Error::Container(_))));

        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(read_container(long.as_slice()), Err(Error::Container(_))));

        let mut wrong = header.clone();
        wrong.record_count = 3;
        assert!(write_container(Vec::new(), &wrong, &shots).is_err());
    }

    #[test]
    fn csv_shape() {
        let (_, shots) = batch();
        let csv = shots_to_csv(&shots);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 11);
        assert!(lines[0].starts_with("shot,n,m,v0,"));
        assert_eq!(lines[1].split(',').count(), 3 + 64);
    }
}
