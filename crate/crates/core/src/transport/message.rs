//! Typed requests and responses and their frame bodies.
//!
//! Word indices travel as u32, seeds and call ids as u64, scalars as
//! IEEE-754 binary32, all little-endian. The byte-exact tables live in
//! `docs/protocol.md`.

use crate::error::{Error, Result};
use crate::shard::{AdjustRequest, DotprodRequest, PartialDotResult, ShardInfo};
use crate::store::Matrix;

use super::frame::{Frame, OpCode};

#[derive(Debug, Clone, PartialEq)]
pub enum Request {
    Hello,
    Dotprod(DotprodRequest),
    Adjust(AdjustRequest),
    Export {
        matrix: Matrix,
        start: u32,
        count: u32,
    },
    Shutdown,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Response {
    Hello(ShardInfo),
    Dotprod(PartialDotResult),
    Adjust,
    Export {
        matrix: Matrix,
        start: u32,
        count: u32,
        width: u32,
        values: Vec<f32>,
    },
    Shutdown,
    Error(String),
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, x: u8) {
        self.0.push(x);
    }
    fn u32(&mut self, x: u32) {
        self.0.extend_from_slice(&x.to_le_bytes());
    }
    fn u64(&mut self, x: u64) {
        self.0.extend_from_slice(&x.to_le_bytes());
    }
    fn len(&mut self, n: usize) {
        self.u32(u32::try_from(n).expect("array length exceeds u32"));
    }
    fn u32s(&mut self, xs: &[u32]) {
        for &x in xs {
            self.u32(x);
        }
    }
    fn f32s(&mut self, xs: &[f32]) {
        for &x in xs {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(Error::Frame(format!(
                "body truncated: need {n} bytes, have {}",
                self.buf.len()
            )));
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
    /// Reads a u32 element count and checks the elements fit in what is left.
    fn count(&mut self, elem_size: usize) -> Result<usize> {
        let n = self.u32()? as usize;
        if n.saturating_mul(elem_size) > self.buf.len() {
            return Err(Error::Frame(format!("array of {n} elements exceeds body")));
        }
        Ok(n)
    }
    fn u32s(&mut self, n: usize) -> Result<Vec<u32>> {
        Ok(self
            .take(n * 4)?
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        Ok(self
            .take(n * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
    fn finish(self) -> Result<()> {
        if self.buf.is_empty() {
            Ok(())
        } else {
            Err(Error::Frame(format!(
                "{} trailing bytes in body",
                self.buf.len()
            )))
        }
    }
}

fn write_minibatch(
    w: &mut Writer,
    seed: u64,
    negatives: u32,
    inputs: &[u32],
    outputs: &[Vec<u32>],
) {
    assert_eq!(
        inputs.len(),
        outputs.len(),
        "inputs and context lists differ in length"
    );
    w.u64(seed);
    w.u32(negatives);
    w.len(inputs.len());
    w.u32s(inputs);
    for ctx in outputs {
        w.len(ctx.len());
        w.u32s(ctx);
    }
}

type MinibatchFields = (u64, u32, Vec<u32>, Vec<Vec<u32>>);

fn read_minibatch(r: &mut Reader) -> Result<MinibatchFields> {
    let seed = r.u64()?;
    let negatives = r.u32()?;
    let n = r.count(8)?;
    let inputs = r.u32s(n)?;
    let mut outputs = Vec::with_capacity(n);
    for _ in 0..n {
        let len = r.count(4)?;
        outputs.push(r.u32s(len)?);
    }
    Ok((seed, negatives, inputs, outputs))
}

impl Request {
    pub fn op(&self) -> OpCode {
        match self {
            Request::Hello => OpCode::Hello,
            Request::Dotprod(_) => OpCode::Dotprod,
            Request::Adjust(_) => OpCode::Adjust,
            Request::Export { .. } => OpCode::Export,
            Request::Shutdown => OpCode::Shutdown,
        }
    }

    pub fn to_frame(&self, call_id: u64) -> Frame {
        let mut w = Writer(Vec::new());
        match self {
            Request::Hello | Request::Shutdown => {}
            Request::Dotprod(d) => {
                write_minibatch(&mut w, d.seed, d.negatives, &d.inputs, &d.outputs)
            }
            Request::Adjust(a) => {
                write_minibatch(&mut w, a.seed, a.negatives, &a.inputs, &a.outputs);
                w.len(a.g_plus.len());
                w.f32s(&a.g_plus);
                w.len(a.g_minus.len());
                w.f32s(&a.g_minus);
            }
            Request::Export {
                matrix,
                start,
                count,
            } => {
                w.u8(matrix.code());
                w.u32(*start);
                w.u32(*count);
            }
        }
        Frame::new(self.op(), call_id, w.0)
    }

    pub fn from_frame(frame: &Frame) -> Result<Request> {
        let mut r = Reader { buf: &frame.body };
        let req = match frame.op {
            OpCode::Hello => Request::Hello,
            OpCode::Shutdown => Request::Shutdown,
            OpCode::Dotprod => {
                let (seed, negatives, inputs, outputs) = read_minibatch(&mut r)?;
                Request::Dotprod(DotprodRequest {
                    inputs,
                    outputs,
                    seed,
                    negatives,
                })
            }
            OpCode::Adjust => {
                let (seed, negatives, inputs, outputs) = read_minibatch(&mut r)?;
                let n = r.count(4)?;
                let g_plus = r.f32s(n)?;
                let n = r.count(4)?;
                let g_minus = r.f32s(n)?;
                Request::Adjust(AdjustRequest {
                    inputs,
                    outputs,
                    g_plus,
                    g_minus,
                    seed,
                    negatives,
                })
            }
            OpCode::Export => {
                let code = r.u8()?;
                let matrix = Matrix::from_code(code)
                    .ok_or_else(|| Error::Frame(format!("unknown matrix {code}")))?;
                Request::Export {
                    matrix,
                    start: r.u32()?,
                    count: r.u32()?,
                }
            }
            OpCode::Response | OpCode::Error => {
                return Err(Error::Protocol(format!(
                    "{:?} frame is not a request",
                    frame.op
                )))
            }
        };
        r.finish()?;
        Ok(req)
    }

    /// Bytes of gradient coefficients (G arrays) carried by this request.
    pub fn scalar_payload_bytes(&self) -> usize {
        match self {
            Request::Adjust(a) => 4 * (a.g_plus.len() + a.g_minus.len()),
            _ => 0,
        }
    }
}

impl Response {
    /// The request op this response answers; `Error` for error frames.
    pub fn kind(&self) -> OpCode {
        match self {
            Response::Hello(_) => OpCode::Hello,
            Response::Dotprod(_) => OpCode::Dotprod,
            Response::Adjust => OpCode::Adjust,
            Response::Export { .. } => OpCode::Export,
            Response::Shutdown => OpCode::Shutdown,
            Response::Error(_) => OpCode::Error,
        }
    }

    pub fn to_frame(&self, call_id: u64) -> Frame {
        let mut w = Writer(Vec::new());
        if let Response::Error(message) = self {
            w.len(message.len());
            w.0.extend_from_slice(message.as_bytes());
            return Frame::new(OpCode::Error, call_id, w.0);
        }
        w.u8(self.kind() as u8);
        match self {
            Response::Hello(info) => {
                for x in [
                    info.shard_id,
                    info.num_shards,
                    info.dim,
                    info.lo,
                    info.hi,
                    info.vocab_size,
                ] {
                    w.u32(x);
                }
            }
            Response::Dotprod(r) => {
                w.len(r.f_plus.len());
                w.f32s(&r.f_plus);
                w.len(r.f_minus.len());
                w.f32s(&r.f_minus);
            }
            Response::Export {
                matrix,
                start,
                count,
                width,
                values,
            } => {
                assert_eq!(values.len(), *count as usize * *width as usize);
                w.u8(matrix.code());
                w.u32(*start);
                w.u32(*count);
                w.u32(*width);
                w.f32s(values);
            }
            Response::Adjust | Response::Shutdown | Response::Error(_) => {}
        }
        Frame::new(OpCode::Response, call_id, w.0)
    }

    pub fn from_frame(frame: &Frame) -> Result<Response> {
        let mut r = Reader { buf: &frame.body };
        let resp = match frame.op {
            OpCode::Error => {
                let n = r.count(1)?;
                let msg = String::from_utf8_lossy(r.take(n)?).into_owned();
                Response::Error(msg)
            }
            OpCode::Response => {
                let kind = r.u8()?;
                match OpCode::from_u8(kind) {
                    Some(OpCode::Hello) => {
                        let mut f = [0u32; 6];
                        for x in &mut f {
                            *x = r.u32()?;
                        }
                        Response::Hello(ShardInfo {
                            shard_id: f[0],
                            num_shards: f[1],
                            dim: f[2],
                            lo: f[3],
                            hi: f[4],
                            vocab_size: f[5],
                        })
                    }
                    Some(OpCode::Dotprod) => {
                        let n = r.count(4)?;
                        let f_plus = r.f32s(n)?;
                        let n = r.count(4)?;
                        let f_minus = r.f32s(n)?;
                        Response::Dotprod(PartialDotResult { f_plus, f_minus })
                    }
                    Some(OpCode::Adjust) => Response::Adjust,
                    Some(OpCode::Shutdown) => Response::Shutdown,
                    Some(OpCode::Export) => {
                        let code = r.u8()?;
                        let matrix = Matrix::from_code(code)
                            .ok_or_else(|| Error::Frame(format!("unknown matrix {code}")))?;
                        let start = r.u32()?;
                        let count = r.u32()?;
                        let width = r.u32()?;
                        let n = (count as usize)
                            .checked_mul(width as usize)
                            .filter(|n| n.saturating_mul(4) <= r.buf.len())
                            .ok_or_else(|| Error::Frame("export rows exceed body".into()))?;
                        Response::Export {
                            matrix,
                            start,
                            count,
                            width,
                            values: r.f32s(n)?,
                        }
                    }
                    _ => return Err(Error::Frame(format!("unknown response kind {kind:#04x}"))),
                }
            }
            op => return Err(Error::Protocol(format!("{op:?} frame is not a response"))),
        };
        r.finish()?;
        Ok(resp)
    }

    /// Bytes of partial dot products (F arrays) carried by this response.
    pub fn scalar_payload_bytes(&self) -> usize {
        match self {
            Response::Dotprod(r) => 4 * (r.f_plus.len() + r.f_minus.len()),
            _ => 0,
        }
    }
}

/// The op a frame belongs to for accounting: requests by their own op,
/// responses by the op they answer.
pub fn accounting_op(frame: &Frame) -> OpCode {
    match frame.op {
        OpCode::Response => frame
            .body
            .first()
            .and_then(|&k| OpCode::from_u8(k))
            .unwrap_or(OpCode::Error),
        op => op,
    }
}

/// Whether a frame's schema carries embedding vector components.
///
/// Only export responses do. Training traffic (hello, dotprod, adjust and
/// their responses) carries indices, seeds and per-pair scalars only.
pub fn carries_vector_components(frame: &Frame) -> bool {
    frame.op == OpCode::Response && frame.body.first() == Some(&(OpCode::Export as u8))
}

/// F/G scalar bytes in a frame, computed from the schema without decoding
/// the arrays themselves.
pub fn scalar_payload_bytes(frame: &Frame) -> usize {
    let body = &frame.body;
    let read_u32 = |at: usize| -> Option<usize> {
        body.get(at..at + 4)
            .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    };
    let payload = || -> Option<usize> {
        match frame.op {
            OpCode::Response if body.first() == Some(&(OpCode::Dotprod as u8)) => {
                let n_plus = read_u32(1)?;
                let n_minus = read_u32(5 + 4 * n_plus)?;
                Some(4 * (n_plus + n_minus))
            }
            OpCode::Adjust => {
                // seed, negatives, n_inputs, inputs, then per-input lists.
                let n = read_u32(12)?;
                let mut at = 16 + 4 * n;
                for _ in 0..n {
                    at += 4 + 4 * read_u32(at)?;
                }
                let n_plus = read_u32(at)?;
                let n_minus = read_u32(at + 4 + 4 * n_plus)?;
                Some(4 * (n_plus + n_minus))
            }
            _ => Some(0),
        }
    };
    payload().unwrap_or(0)
}
