//! Binary checkpoint format. All integers and floats are little-endian.
//!
//! ```text
//! "SFRZ"  u16 version
//! config: u32 vocab_size, embed_dim, depth, context, window, hidden; u64 seed
//! u32 entry count, then per entry:
//!     u16 id length, id bytes (UTF-8), u8 trainable, u8 ndim, u32 dims[ndim],
//!     f64 data[product(dims)]
//! tagged sections: [u8; 4] tag, u64 payload length, payload
//!     LORA  u32 count; per adapter: u16 len, target, u32 rank, f64 alpha, u8 scale mode
//!     IMPT  u8 estimator, u64 sample count, u32 count;
//!           per entry: u16 len, id, u64 numel, f64 scores[numel]
//!     MASK  f64 threshold, u32 count; per entry: u16 len, id, u64 numel, u8 frozen[numel]
//!     END   empty; always last, so a file cut at a section boundary is detected
//! ```

use std::fs;
use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::importance::{EstimatorKind, FreezeMask, ImportanceMap};
use crate::model::lora::{LoraAdapter, ScaleMode};
use crate::model::registry::ParameterRegistry;
use crate::model::tinylm::{ModelConfig, TinyLm};

pub const MAGIC: &[u8; 4] = b"SFRZ";
pub const VERSION: u16 = 1;

const TAG_LORA: &[u8; 4] = b"LORA";
const TAG_IMPT: &[u8; 4] = b"IMPT";
const TAG_MASK: &[u8; 4] = b"MASK";
const TAG_END: &[u8; 4] = b"END ";

/// Bytes of an IMPT section that do not depend on the entries: tag, length,
/// estimator, sample count and entry count.
pub const IMPT_FIXED_HEADER: usize = 4 + 8 + 1 + 8 + 4;
/// Per-entry framing in an IMPT section besides the id bytes and scores.
pub const IMPT_ENTRY_OVERHEAD: usize = 2 + 8;

/// Everything a checkpoint file holds.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: TinyLm,
    pub importance: Option<ImportanceMap>,
    pub mask: Option<FreezeMask>,
}

/// Size of the IMPT section written for `imap`: `8N` plus metadata.
pub fn importance_section_len(imap: &ImportanceMap) -> usize {
    let framing: usize = imap.iter().map(|(id, _)| IMPT_ENTRY_OVERHEAD + id.len()).sum();
    IMPT_FIXED_HEADER + framing + 8 * imap.total_scalars()
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn id(&mut self, id: &str) -> Result<()> {
        let len = u16::try_from(id.len()).map_err(|_| Error::Checkpoint(format!("id too long: {id}")))?;
        self.u16(len);
        self.0.extend_from_slice(id.as_bytes());
        Ok(())
    }
    fn section(&mut self, tag: &[u8; 4], payload: Writer) {
        self.0.extend_from_slice(tag);
        self.u64(payload.0.len() as u64);
        self.0.extend_from_slice(&payload.0);
    }
}

fn count_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Checkpoint(format!("count {n} exceeds u32")))
}

pub fn encode_checkpoint(
    model: &TinyLm,
    importance: Option<&ImportanceMap>,
    mask: Option<&FreezeMask>,
) -> Result<Vec<u8>> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u16(VERSION);
    let c = &model.config;
    for v in [c.vocab_size, c.embed_dim, c.depth, c.context, c.window, c.hidden] {
        w.u32(count_u32(v)?);
    }
    w.u64(model.seed);

    w.u32(count_u32(model.registry.len())?);
    for (id, t) in model.registry.iter() {
        w.id(id)?;
        w.u8(u8::from(t.requires_grad()));
        w.u8(u8::try_from(t.shape().len()).map_err(|_| Error::Checkpoint("too many dims".into()))?);
        for &d in t.shape() {
            w.u32(count_u32(d)?);
        }
        t.data().iter().for_each(|&x| w.f64(x));
    }

    if !model.adapters.is_empty() {
        let mut p = Writer(Vec::new());
        p.u32(count_u32(model.adapters.len())?);
        for a in &model.adapters {
            p.id(&a.target)?;
            p.u32(count_u32(a.rank)?);
            p.f64(a.alpha);
            p.u8(match a.scale_mode {
                ScaleMode::Standard => 0,
                ScaleMode::RankStabilized => 1,
            });
        }
        w.section(TAG_LORA, p);
    }
    if let Some(imap) = importance {
        let mut p = Writer(Vec::new());
        p.u8(imap.kind().code());
        p.u64(imap.sample_count());
        p.u32(count_u32(imap.len())?);
        for (id, scores) in imap.iter() {
            p.id(id)?;
            p.u64(scores.len() as u64);
            scores.iter().for_each(|&x| p.f64(x));
        }
        w.section(TAG_IMPT, p);
    }
    if let Some(mask) = mask {
        let mut p = Writer(Vec::new());
        p.f64(mask.threshold());
        p.u32(count_u32(mask.iter().count())?);
        for (id, frozen) in mask.iter() {
            p.id(id)?;
            p.u64(frozen.len() as u64);
            frozen.iter().for_each(|&b| p.u8(u8::from(b)));
        }
        w.section(TAG_MASK, p);
    }
    w.section(TAG_END, Writer(Vec::new()));
    Ok(w.0)
}

pub fn save_checkpoint(
    path: &Path,
    model: &TinyLm,
    importance: Option<&ImportanceMap>,
    mask: Option<&FreezeMask>,
) -> Result<()> {
    let bytes = encode_checkpoint(model, importance, mask)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {} (wanted {n} more)", self.pos)))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }
    fn len_u64(&mut self) -> Result<usize> {
        let n = self.u64()?;
        let n = usize::try_from(n).map_err(|_| Error::Checkpoint("length overflow".into()))?;
        // every element takes at least one byte
        if n > self.buf.len() - self.pos {
            return Err(Error::Checkpoint(format!("length {n} runs past end of file")));
        }
        Ok(n)
    }
    fn id(&mut self) -> Result<String> {
        let len = self.u16()? as usize;
        String::from_utf8(self.take(len)?.to_vec()).map_err(|_| Error::Checkpoint("id is not UTF-8".into()))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect())
    }
    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

fn decode_adapters(r: &mut Reader) -> Result<Vec<LoraAdapter>> {
    let n = r.u32()?;
    (0..n)
        .map(|_| {
            let target = r.id()?;
            let rank = r.u32()? as usize;
            let alpha = r.f64()?;
            let scale_mode = match r.u8()? {
                0 => ScaleMode::Standard,
                1 => ScaleMode::RankStabilized,
                other => return Err(Error::Checkpoint(format!("unknown scale mode {other}"))),
            };
            Ok(LoraAdapter {
                target,
                rank,
                alpha,
                scale_mode,
            })
        })
        .collect()
}

fn decode_importance(r: &mut Reader) -> Result<ImportanceMap> {
    let kind = r.u8()?;
    let kind = EstimatorKind::from_code(kind).ok_or_else(|| Error::Checkpoint(format!("unknown estimator {kind}")))?;
    let samples = r.u64()?;
    let n = r.u32()?;
    let mut entries = Vec::new();
    for _ in 0..n {
        let id = r.id()?;
        let len = r.len_u64()?;
        entries.push((id, r.f64s(len)?));
    }
    ImportanceMap::new(kind, samples, entries).map_err(|e| Error::Checkpoint(format!("bad IMPT section: {e}")))
}

fn decode_mask(r: &mut Reader) -> Result<FreezeMask> {
    let threshold = r.f64()?;
    let n = r.u32()?;
    let mut entries = Vec::new();
    for _ in 0..n {
        let id = r.id()?;
        let len = r.len_u64()?;
        let bits = r
            .take(len)?
            .iter()
            .map(|&b| match b {
                0 => Ok(false),
                1 => Ok(true),
                other => Err(Error::Checkpoint(format!("mask byte {other}"))),
            })
            .collect::<Result<Vec<bool>>>()?;
        entries.push((id, bits));
    }
    Ok(FreezeMask::new(threshold, entries))
}

/// Parses and validates a checkpoint: parameter ids and shapes must be exactly
/// those the stored architecture and adapters produce.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if &r.array::<4>()? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let mut dims = [0usize; 6];
    for d in &mut dims {
        *d = r.u32()? as usize;
    }
    let config = ModelConfig {
        vocab_size: dims[0],
        embed_dim: dims[1],
        depth: dims[2],
        context: dims[3],
        window: dims[4],
        hidden: dims[5],
    };
    let seed = r.u64()?;

    let n = r.u32()?;
    let mut entries = Vec::new();
    for _ in 0..n {
        let id = r.id()?;
        let trainable = match r.u8()? {
            0 => false,
            1 => true,
            other => return Err(Error::Checkpoint(format!("trainable flag {other}"))),
        };
        let ndim = r.u8()? as usize;
        let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Checkpoint("shape overflow".into()))?;
        let data = r.f64s(numel)?;
        let tensor = Tensor::new(&shape, data).map_err(|e| Error::Checkpoint(format!("entry {id}: {e}")))?;
        entries.push((id, tensor.with_grad(trainable)));
    }

    let mut adapters = Vec::new();
    let mut importance = None;
    let mut mask = None;
    loop {
        let tag = r.array::<4>()?;
        let len = r.len_u64()?;
        let mut sub = Reader {
            buf: r.take(len)?,
            pos: 0,
        };
        match &tag {
            TAG_LORA => adapters = decode_adapters(&mut sub)?,
            TAG_IMPT => importance = Some(decode_importance(&mut sub)?),
            TAG_MASK => mask = Some(decode_mask(&mut sub)?),
            TAG_END => break,
            other => {
                return Err(Error::Checkpoint(format!(
                    "unknown section {}",
                    String::from_utf8_lossy(other)
                )))
            }
        }
        if !sub.done() {
            return Err(Error::Checkpoint(format!(
                "trailing bytes in section {}",
                String::from_utf8_lossy(&tag)
            )));
        }
    }

    if !r.done() {
        return Err(Error::Checkpoint("data after END section".into()));
    }
    let model = assemble(config, seed, entries, adapters)?;
    Ok(Checkpoint {
        model,
        importance,
        mask,
    })
}

fn assemble(
    config: ModelConfig,
    seed: u64,
    entries: Vec<(String, Tensor)>,
    adapters: Vec<LoraAdapter>,
) -> Result<TinyLm> {
    let reference = TinyLm::build(&config, seed).map_err(|e| Error::Checkpoint(format!("stored architecture invalid: {e}")))?;
    let mut expected: Vec<(String, Vec<usize>)> = reference
        .registry
        .iter()
        .map(|(id, t)| (id.to_string(), t.shape().to_vec()))
        .collect();
    for a in &adapters {
        let (d_out, d_in) = reference
            .registry
            .get(&a.target)
            .and_then(Tensor::dims2)
            .ok_or_else(|| Error::Checkpoint(format!("adapter target {} is not a weight matrix", a.target)))?;
        expected.push((a.a_id(), vec![a.rank, d_in]));
        expected.push((a.b_id(), vec![d_out, a.rank]));
    }
    if expected.len() != entries.len() {
        return Err(Error::Checkpoint(format!(
            "architecture expects {} parameters, file has {}",
            expected.len(),
            entries.len()
        )));
    }
    let mut registry = ParameterRegistry::new();
    for ((eid, eshape), (id, tensor)) in expected.into_iter().zip(entries) {
        if eid != id || eshape != tensor.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter {id} {:?} does not match architecture slot {eid} {eshape:?}",
                tensor.shape()
            )));
        }
        registry.insert(id, tensor)?;
    }
    Ok(TinyLm {
        config,
        seed,
        registry,
        adapters,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
    decode_checkpoint(&bytes)
}

impl Checkpoint {
    /// Fails unless the stored architecture equals `expected`.
    pub fn expect_config(&self, expected: &ModelConfig) -> Result<()> {
        if &self.model.config != expected {
            return Err(Error::Checkpoint(format!(
                "checkpoint architecture {:?} does not match {:?}",
                self.model.config, expected
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::importance::PartitionCriterion;
    use crate::model::lora::LoraSpec;

    fn cfg() -> ModelConfig {
        ModelConfig {
            vocab_size: 5,
            embed_dim: 2,
            depth: 2,
            context: 6,
            window: 2,
            hidden: 3,
        }
    }

    fn imap(model: &TinyLm) -> ImportanceMap {
        ImportanceMap::new(
            EstimatorKind::Gradient,
            3,
            model
                .registry()
                .trainable()
                .map(|(id, t)| (id.to_string(), t.data().iter().map(|x| x.abs()).collect())),
        )
        .unwrap()
    }

    #[test]
    fn roundtrip_is_bitwise() {
        let mut m = TinyLm::build(&cfg(), 9).unwrap();
        m.attach_lora(&LoraSpec {
            targets: m.block_weight_ids(),
            rank: 2,
            alpha: 8.0,
            scale_mode: ScaleMode::RankStabilized,
            seed: 1,
        })
        .unwrap();
        m.registry_mut().get_mut("blocks.1.fc2.weight.lora_b").unwrap().data_mut()[1] = -0.0;
        let im = imap(&m);
        let mask = crate::importance::partition(&im, PartitionCriterion::TopFraction(0.3)).unwrap();
        let bytes = encode_checkpoint(&m, Some(&im), Some(&mask)).unwrap();
        let ck = decode_checkpoint(&bytes).unwrap();
        assert!(ck.model.registry().bitwise_eq(m.registry()));
        assert_eq!(ck.model, m);
        assert_eq!(ck.importance.as_ref(), Some(&im));
        assert_eq!(ck.mask.as_ref(), Some(&mask));
        assert_eq!(encode_checkpoint(&ck.model, Some(&im), Some(&mask)).unwrap(), bytes);
    }

    #[test]
    fn importance_section_size_is_8n_plus_header() {
        let m = TinyLm::build(&cfg(), 2).unwrap();
        let im = imap(&m);
        let with = encode_checkpoint(&m, Some(&im), None).unwrap().len();
        let without = encode_checkpoint(&m, None, None).unwrap().len();
        assert_eq!(with - without, importance_section_len(&im));
        let ids: usize = m.registry().ids().map(|id| id.len() + IMPT_ENTRY_OVERHEAD).sum();
        assert_eq!(importance_section_len(&im), 8 * m.registry().total_scalars() + IMPT_FIXED_HEADER + ids);
    }

    #[test]
    fn every_truncation_is_an_error() {
        let m = TinyLm::build(&cfg(), 2).unwrap();
        let im = imap(&m);
        let bytes = encode_checkpoint(&m, Some(&im), None).unwrap();
        for cut in 0..bytes.len() {
            assert!(
                matches!(decode_checkpoint(&bytes[..cut]), Err(Error::Checkpoint(_))),
                "cut at {cut}"
            );
        }
    }

    #[test]
    fn corrupt_and_mismatched() {
        let m = TinyLm::build(&cfg(), 2).unwrap();
        let mut bytes = encode_checkpoint(&m, None, None).unwrap();
        bytes[0] = b'X';
        assert!(matches!(decode_checkpoint(&bytes), Err(Error::Checkpoint(_))));

        let ck = decode_checkpoint(&encode_checkpoint(&m, None, None).unwrap()).unwrap();
        let mut other = cfg();
        other.hidden = 4;
        assert!(matches!(ck.expect_config(&other), Err(Error::Checkpoint(_))));
        ck.expect_config(&cfg()).unwrap();

        // rewrite the stored hidden width: entries no longer fit the architecture
        let mut bytes = encode_checkpoint(&m, None, None).unwrap();
        bytes[6 + 5 * 4..6 + 6 * 4].copy_from_slice(&4u32.to_le_bytes());
        assert!(matches!(decode_checkpoint(&bytes), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = TinyLm::build(&cfg(), 5).unwrap();
        save_checkpoint(&path, &m, None, None).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap().model, m);
        assert!(matches!(
            load_checkpoint(&dir.path().join("missing")),
            Err(Error::Checkpoint(_))
        ));
    }
}
