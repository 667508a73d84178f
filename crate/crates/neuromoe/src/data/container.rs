//! Dataset container I/O.
//!
//! Little-endian layout: magic `NMOE`, format version u32 = 1, record count
//! u32; per record — id length u16 + UTF-8 id, label u8, three modality
//! blocks (rank u8, dims u32 × rank, f32 payload) in aMRI/DTI/fMRI order,
//! clinical block and serum block (count u8, f32 values, missing bitmap),
//! record CRC32; finally a CRC32 trailer over everything before it.
//!
//! Payloads are 32-bit floats and files are NaN-free: missing tabular values
//! travel in the bitmaps (bit i of byte i/8, least-significant bit first,
//! padding bits zero) with 0.0 written in the value slot.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crc32fast::Hasher;

use super::{ClassLabel, SubjectRecord};
use crate::autodiff::Tensor;
use crate::bytes::{push_u32, Reader};
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"NMOE";
const VERSION: u32 = 1;

fn encode_volume(buf: &mut Vec<u8>, volume: &Tensor, id: &str, name: &str, rank: usize) -> Result<()> {
    let shape = volume.shape();
    if shape.len() != rank {
        return Err(Error::Data(format!(
            "subject {id}: {name} volume has rank {}, expected {rank}",
            shape.len()
        )));
    }
    buf.push(shape.len() as u8);
    for &d in shape {
        let d = u32::try_from(d).map_err(|_| {
            Error::Data(format!("subject {id}: {name} dimension {d} exceeds u32"))
        })?;
        push_u32(buf, d);
    }
    for &v in volume.data() {
        if !v.is_finite() {
            return Err(Error::Data(format!(
                "subject {id}: {name} volume contains a non-finite value; volumes cannot carry missing markers"
            )));
        }
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(())
}

fn encode_tabular(buf: &mut Vec<u8>, values: &[f64], id: &str, name: &str) -> Result<()> {
    buf.push(values.len() as u8);
    let mut bitmap = vec![0u8; values.len().div_ceil(8)];
    for (i, &v) in values.iter().enumerate() {
        if v.is_nan() {
            bitmap[i / 8] |= 1 << (i % 8);
            buf.extend_from_slice(&0.0_f32.to_le_bytes());
        } else if !v.is_finite() {
            return Err(Error::Data(format!(
                "subject {id}: {name} value {v} is not storable"
            )));
        } else {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    buf.extend_from_slice(&bitmap);
    Ok(())
}

fn encode_record(record: &SubjectRecord) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    let id_len = u16::try_from(record.id.len()).map_err(|_| {
        Error::Data(format!(
            "subject id of {} bytes exceeds the u16 length field",
            record.id.len()
        ))
    })?;
    buf.extend_from_slice(&id_len.to_le_bytes());
    buf.extend_from_slice(record.id.as_bytes());
    buf.push(record.label.index() as u8);
    encode_volume(&mut buf, &record.amri, &record.id, "aMRI", 3)?;
    encode_volume(&mut buf, &record.dti, &record.id, "DTI", 4)?;
    encode_volume(&mut buf, &record.fmri, &record.id, "fMRI", 4)?;
    encode_tabular(&mut buf, &record.clinical, &record.id, "clinical")?;
    encode_tabular(&mut buf, &record.serum, &record.id, "serum")?;
    Ok(buf)
}

/// Write a cohort to `path`. Values are stored at f32 precision; cohorts from
/// the generator round-trip bit-exactly because they are f32-quantized at
/// generation time.
pub fn save_dataset(records: &[SubjectRecord], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let mut file_crc = Hasher::new();
    let mut emit = |out: &mut BufWriter<File>, bytes: &[u8]| -> Result<()> {
        file_crc.update(bytes);
        out.write_all(bytes).map_err(|e| Error::io(path, e))
    };

    let mut header = Vec::with_capacity(12);
    header.extend_from_slice(MAGIC);
    push_u32(&mut header, VERSION);
    let count = u32::try_from(records.len())
        .map_err(|_| Error::Data(format!("{} records exceed the u32 count field", records.len())))?;
    push_u32(&mut header, count);
    emit(&mut out, &header)?;

    for record in records {
        let body = encode_record(record)?;
        emit(&mut out, &body)?;
        emit(&mut out, &crc32fast::hash(&body).to_le_bytes())?;
    }

    let trailer = file_crc.finalize().to_le_bytes();
    out.write_all(&trailer).map_err(|e| Error::io(path, e))?;
    out.flush().map_err(|e| Error::io(path, e))
}

// ── Reading ──

fn decode_volume(r: &mut Reader, name: &str, expected_rank: usize) -> Result<Tensor> {
    let rank_offset = r.pos;
    let rank = r.u8(&format!("{name} rank"))? as usize;
    if rank != expected_rank {
        return Err(Error::Format(format!(
            "{name} block at offset {rank_offset}: rank {rank}, expected {expected_rank}"
        )));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut numel = 1usize;
    for axis in 0..rank {
        let dim_offset = r.pos;
        let d = r.u32(&format!("{name} dimension {axis}"))? as usize;
        if d == 0 {
            return Err(Error::Format(format!(
                "{name} dimension {axis} at offset {dim_offset} is 0"
            )));
        }
        numel = numel.checked_mul(d).ok_or_else(|| {
            Error::Format(format!(
                "{name} dimensions overflow at offset {dim_offset}"
            ))
        })?;
        shape.push(d);
    }
    let payload_offset = r.pos;
    let payload = r.take(numel * 4, &format!("{name} payload"))?;
    let mut data = Vec::with_capacity(numel);
    for (i, chunk) in payload.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        if !v.is_finite() {
            return Err(Error::Format(format!(
                "{name} payload holds non-finite value at offset {}",
                payload_offset + 4 * i
            )));
        }
        data.push(v as f64);
    }
    Tensor::new(&shape, data)
}

fn decode_tabular<const N: usize>(r: &mut Reader, name: &str) -> Result<[f64; N]> {
    let count_offset = r.pos;
    let count = r.u8(&format!("{name} count"))? as usize;
    if count != N {
        return Err(Error::Format(format!(
            "{name} block at offset {count_offset}: count {count}, expected {N}"
        )));
    }
    let mut values = [0.0f64; N];
    for (i, slot) in values.iter_mut().enumerate() {
        let offset = r.pos;
        let v = r.f32(&format!("{name} value {i}"))?;
        if !v.is_finite() {
            return Err(Error::Format(format!(
                "{name} value {i} at offset {offset} is non-finite; files must encode missing values in the bitmap"
            )));
        }
        *slot = v as f64;
    }
    let bitmap_offset = r.pos;
    let bitmap = r.take(N.div_ceil(8), &format!("{name} missing bitmap"))?;
    for byte in 0..bitmap.len() {
        for bit in 0..8 {
            let i = byte * 8 + bit;
            let set = bitmap[byte] & (1 << bit) != 0;
            if i < N {
                if set {
                    values[i] = f64::NAN;
                }
            } else if set {
                return Err(Error::Format(format!(
                    "{name} missing bitmap at offset {bitmap_offset} has padding bit {i} set"
                )));
            }
        }
    }
    Ok(values)
}

fn decode_record(r: &mut Reader, index: u32) -> Result<SubjectRecord> {
    let start = r.pos;
    let what = format!("record {index}");
    let id_len = r.u16(&format!("{what} id length"))? as usize;
    let id_offset = r.pos;
    let id = std::str::from_utf8(r.take(id_len, &format!("{what} id"))?)
        .map_err(|_| Error::Format(format!("{what}: id at offset {id_offset} is not UTF-8")))?
        .to_string();
    let label_offset = r.pos;
    let label_byte = r.u8(&format!("{what} label"))?;
    let label = ClassLabel::from_index(label_byte as usize).map_err(|_| {
        Error::Format(format!(
            "{what}: label {label_byte} at offset {label_offset} out of range"
        ))
    })?;
    let amri = decode_volume(r, &format!("{what} aMRI"), 3)?;
    let dti = decode_volume(r, &format!("{what} DTI"), 4)?;
    let fmri = decode_volume(r, &format!("{what} fMRI"), 4)?;
    let clinical = decode_tabular::<7>(r, &format!("{what} clinical"))?;
    let serum = decode_tabular::<3>(r, &format!("{what} serum"))?;

    let body_end = r.pos;
    let stored = r.u32(&format!("{what} checksum"))?;
    let computed = crc32fast::hash(&r.bytes[start..body_end]);
    if stored != computed {
        return Err(Error::Format(format!(
            "{what}: checksum mismatch at offset {body_end} (stored {stored:08x}, computed {computed:08x})"
        )));
    }
    Ok(SubjectRecord {
        id,
        label,
        amri,
        dti,
        fmri,
        clinical,
        serum,
    })
}

/// Load a cohort, validating magic, version, both checksum layers, and every
/// structural field. Errors carry the byte offset where decoding failed.
pub fn load_dataset(path: &Path) -> Result<Vec<SubjectRecord>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 {
        return Err(Error::Format(format!(
            "file is {} byte(s); a valid container is at least 16",
            bytes.len()
        )));
    }
    let trailer_offset = bytes.len() - 4;
    let stored = u32::from_le_bytes(bytes[trailer_offset..].try_into().unwrap());
    let computed = crc32fast::hash(&bytes[..trailer_offset]);

    let mut r = Reader::new(&bytes[..trailer_offset]);
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format(format!(
            "bad magic {magic:02x?} at offset 0 (expected \"NMOE\")"
        )));
    }
    let version = r.u32("format version")?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported format version {version} at offset 4 (expected {VERSION})"
        )));
    }
    if stored != computed {
        return Err(Error::Format(format!(
            "file checksum mismatch at offset {trailer_offset} (stored {stored:08x}, computed {computed:08x})"
        )));
    }
    let count = r.u32("record count")?;
    let mut records = Vec::with_capacity(count.min(1 << 20) as usize);
    for i in 0..count {
        records.push(decode_record(&mut r, i)?);
    }
    if r.pos != r.bytes.len() {
        return Err(Error::Format(format!(
            "{} unexpected byte(s) at offset {} after the last record",
            r.bytes.len() - r.pos,
            r.pos
        )));
    }
    Ok(records)
}

// ── Tests ──

#[cfg(test)]
mod tests {
    use super::super::testutil::records_bitwise_eq;
    use super::super::{generate_cohort, CohortSpec};
    use super::*;

    fn tmp(name: &str) -> std::path::PathBuf {
        std::env::temp_dir().join(format!("nmoe-{}-{name}.bin", std::process::id()))
    }

    fn small_cohort() -> Vec<SubjectRecord> {
        let spec = CohortSpec {
            counts: [3, 3, 2],
            volume_shape: [3, 4, 2],
            dti_frames: 2,
            fmri_frames: 3,
            missing_rate: 0.3,
            seed: 11,
            ..CohortSpec::default()
        };
        generate_cohort(&spec).unwrap()
    }

    #[test]
    fn round_trip_is_bitwise_identity() {
        let records = small_cohort();
        // High missing rate above ensures NaN markers cross the format.
        assert!(records.iter().any(|r| r.clinical.iter().any(|v| v.is_nan())));
        let path = tmp("roundtrip");
        save_dataset(&records, &path).unwrap();
        let loaded = load_dataset(&path).unwrap();
        std::fs::remove_file(&path).unwrap();
        assert_eq!(loaded.len(), records.len());
        assert!(records
            .iter()
            .zip(&loaded)
            .all(|(a, b)| records_bitwise_eq(a, b)));
    }

    #[test]
    fn empty_cohort_round_trips() {
        let path = tmp("empty");
        save_dataset(&[], &path).unwrap();
        let loaded = load_dataset(&path).unwrap();
        std::fs::remove_file(&path).unwrap();
        assert!(loaded.is_empty());
    }

    #[test]
    fn corrupted_payload_byte_fails_the_file_checksum() {
        let path = tmp("corrupt");
        save_dataset(&small_cohort(), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        std::fs::write(&path, &bytes).unwrap();
        let err = load_dataset(&path).unwrap_err();
        std::fs::remove_file(&path).unwrap();
        assert!(err.to_string().contains("checksum"), "{err}");
    }

    #[test]
    fn record_checksum_catches_corruption_behind_a_fixed_trailer() {
        let path = tmp("record-crc");
        save_dataset(&small_cohort(), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x01;
        let trailer = bytes.len() - 4;
        let fixed = crc32fast::hash(&bytes[..trailer]).to_le_bytes();
        bytes[trailer..].copy_from_slice(&fixed);
        std::fs::write(&path, &bytes).unwrap();
        let err = load_dataset(&path).unwrap_err();
        std::fs::remove_file(&path).unwrap();
        let msg = err.to_string();
        assert!(msg.contains("checksum mismatch") || msg.contains("offset"), "{msg}");
    }

    #[test]
    fn bad_magic_version_and_truncation_are_rejected() {
        let path = tmp("header");
        save_dataset(&small_cohort(), &path).unwrap();
        let good = std::fs::read(&path).unwrap();

        let mut bad = good.clone();
        bad[0] = b'X';
        std::fs::write(&path, &bad).unwrap();
        assert!(load_dataset(&path).unwrap_err().to_string().contains("magic"));

        let mut bad = good.clone();
        bad[4] = 9;
        let t = bad.len() - 4;
        let crc = crc32fast::hash(&bad[..t]).to_le_bytes();
        bad[t..].copy_from_slice(&crc);
        std::fs::write(&path, &bad).unwrap();
        assert!(load_dataset(&path).unwrap_err().to_string().contains("version"));

        std::fs::write(&path, &good[..good.len() / 3]).unwrap();
        assert!(load_dataset(&path).is_err());

        std::fs::write(&path, b"NM").unwrap();
        assert!(load_dataset(&path).unwrap_err().to_string().contains("byte"));

        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn trailing_bytes_after_records_are_rejected() {
        let path = tmp("trailing");
        save_dataset(&small_cohort(), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let trailer = bytes.len() - 4;
        bytes.splice(trailer..trailer, [0u8; 5]);
        let t = bytes.len() - 4;
        let crc = crc32fast::hash(&bytes[..t]).to_le_bytes();
        bytes[t..].copy_from_slice(&crc);
        std::fs::write(&path, &bytes).unwrap();
        let err = load_dataset(&path).unwrap_err();
        std::fs::remove_file(&path).unwrap();
        assert!(err.to_string().contains("unexpected byte"), "{err}");
    }

    #[test]
    fn volumes_with_nan_are_unwritable() {
        let mut records = small_cohort();
        records[0].amri.data_mut()[0] = f64::NAN;
        let path = tmp("nan-volume");
        let err = save_dataset(&records, &path).unwrap_err();
        assert!(err.to_string().contains("aMRI"), "{err}");
        let _ = std::fs::remove_file(&path);
    }
}
