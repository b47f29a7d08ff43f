//! Binary encoding of policy tables.
//!
//! Layout (little endian): magic `GRPOPOL\0`, format version `u32`, vocabulary
//! fingerprint `u64`, vocab size, prompt buckets and order as `u32`, the
//! allowed-token mask as one byte per token, then every logit as its raw
//! IEEE-754 bit pattern. Decoding reproduces the table bit for bit.

use super::policy::{PolicyParams, PolicyShape};
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"GRPOPOL\0";
pub const FORMAT_VERSION: u32 = 1;

pub fn encode_params(params: &PolicyParams, out: &mut Vec<u8>) {
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&params.vocab_hash().to_le_bytes());
    out.extend_from_slice(&(params.vocab_size() as u32).to_le_bytes());
    out.extend_from_slice(&(params.prompts() as u32).to_le_bytes());
    out.extend_from_slice(&(params.order() as u32).to_le_bytes());
    for t in 0..params.vocab_size() {
        out.push(params.is_allowed(t) as u8);
    }
    for x in params.logits() {
        out.extend_from_slice(&x.to_bits().to_le_bytes());
    }
}

/// Reads from the front of `input`, advancing it past the decoded table.
pub fn decode_params(input: &mut &[u8]) -> Result<PolicyParams> {
    let magic = take(input, 8)?;
    if magic != MAGIC {
        return Err(Error::Format("not a policy table (bad magic)".into()));
    }
    let version = read_u32(input)?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported policy format version {version}")));
    }
    let vocab_hash = read_u64(input)?;
    let vocab_size = read_u32(input)? as usize;
    let prompts = read_u32(input)? as usize;
    let order = read_u32(input)? as usize;
    let mask = take(input, vocab_size)?;
    let allowed = mask
        .iter()
        .enumerate()
        .filter_map(|(t, &b)| (b != 0).then_some(t))
        .collect();
    let shape = PolicyShape {
        vocab_size,
        prompts,
        order,
        allowed,
        vocab_hash,
    };
    let rows = prompts
        .checked_mul(
            (vocab_size + 1)
                .checked_pow(order as u32)
                .ok_or_else(|| Error::Format("policy order too large".into()))?,
        )
        .ok_or_else(|| Error::Format("policy too large".into()))?;
    let count = rows * vocab_size;
    let mut logits = Vec::with_capacity(count);
    for _ in 0..count {
        logits.push(f64::from_bits(read_u64(input)?));
    }
    PolicyParams::from_raw(&shape, logits)
}

pub(crate) fn take<'a>(input: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if input.len() < n {
        return Err(Error::Format("unexpected end of data".into()));
    }
    let (head, tail) = input.split_at(n);
    *input = tail;
    Ok(head)
}

pub(crate) fn read_u32(input: &mut &[u8]) -> Result<u32> {
    Ok(u32::from_le_bytes(take(input, 4)?.try_into().unwrap()))
}

pub(crate) fn read_u64(input: &mut &[u8]) -> Result<u64> {
    Ok(u64::from_le_bytes(take(input, 8)?.try_into().unwrap()))
}
