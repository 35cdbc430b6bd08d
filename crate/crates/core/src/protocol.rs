//! DNFP: a framed request/response stream for serving noise predictions from
//! another process.
//!
//! ```text
//! server -> client   "DNFP 1\n"                          (handshake, once)
//! client -> server   t: u32 LE | tensor container          (request)
//! server -> client   0u8 | tensor container                (success)
//!                    1u8 | len: u32 LE | UTF-8 message     (failure)
//! ```

use std::io::{BufRead, Read, Write};

use crate::container;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const HANDSHAKE: &str = "DNFP 1";
pub const STATUS_OK: u8 = 0;
pub const STATUS_ERROR: u8 = 1;
/// Longest error message accepted from a peer.
pub const MAX_MESSAGE_LEN: usize = 1 << 16;

#[derive(Debug, Clone, PartialEq)]
pub struct Request {
    pub t: u32,
    pub x: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Response {
    Ok(Tensor),
    Err(String),
}

pub fn write_handshake<W: Write>(mut w: W) -> Result<()> {
    w.write_all(HANDSHAKE.as_bytes())?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_handshake<R: BufRead>(mut r: R) -> Result<()> {
    let mut line = Vec::new();
    // Bounded so a garbage peer cannot make us buffer forever.
    (&mut r).take(64).read_until(b'\n', &mut line)?;
    if line.last() != Some(&b'\n') {
        return Err(Error::Transport("peer closed before handshake".into()));
    }
    line.pop();
    if line != HANDSHAKE.as_bytes() {
        return Err(Error::Transport(format!(
            "unexpected handshake {:?}",
            String::from_utf8_lossy(&line)
        )));
    }
    Ok(())
}

pub fn encode_request(req: &Request) -> Result<Vec<u8>> {
    let mut out = req.t.to_le_bytes().to_vec();
    out.extend(container::encode(&req.x)?);
    Ok(out)
}

pub fn write_request<W: Write>(mut w: W, req: &Request) -> Result<()> {
    w.write_all(&encode_request(req)?)?;
    w.flush()?;
    Ok(())
}

pub fn read_request<R: Read>(mut r: R) -> Result<Request> {
    let mut t = [0u8; 4];
    r.read_exact(&mut t)?;
    let x = container::read_tensor(&mut r)?;
    Ok(Request {
        t: u32::from_le_bytes(t),
        x,
    })
}

/// Decode exactly one request frame from a byte slice.
pub fn decode_request(bytes: &[u8]) -> Result<Request> {
    if bytes.len() < 4 {
        return Err(Error::format("request frame", "truncated timestep"));
    }
    let t = u32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
    Ok(Request {
        t,
        x: container::decode(&bytes[4..])?,
    })
}

pub fn encode_response(resp: &Response) -> Result<Vec<u8>> {
    match resp {
        Response::Ok(x) => {
            let mut out = vec![STATUS_OK];
            out.extend(container::encode(x)?);
            Ok(out)
        }
        Response::Err(msg) => {
            let bytes = msg.as_bytes();
            let len = bytes.len().min(MAX_MESSAGE_LEN);
            let mut out = vec![STATUS_ERROR];
            out.extend((len as u32).to_le_bytes());
            out.extend(&bytes[..len]);
            Ok(out)
        }
    }
}

pub fn write_response<W: Write>(mut w: W, resp: &Response) -> Result<()> {
    w.write_all(&encode_response(resp)?)?;
    w.flush()?;
    Ok(())
}

pub fn read_response<R: Read>(mut r: R) -> Result<Response> {
    let mut status = [0u8; 1];
    r.read_exact(&mut status)?;
    match status[0] {
        STATUS_OK => Ok(Response::Ok(container::read_tensor(&mut r)?)),
        STATUS_ERROR => {
            let mut len = [0u8; 4];
            r.read_exact(&mut len)?;
            let len = u32::from_le_bytes(len) as usize;
            if len > MAX_MESSAGE_LEN {
                return Err(Error::format("response frame", "error message too long"));
            }
            let mut msg = vec![0u8; len];
            r.read_exact(&mut msg)?;
            Ok(Response::Err(String::from_utf8(msg).map_err(|e| {
                Error::format("response frame", format!("message is not UTF-8: {e}"))
            })?))
        }
        other => Err(Error::format("response frame", format!("unknown status {other}"))),
    }
}

/// Decode exactly one response frame from a byte slice.
pub fn decode_response(bytes: &[u8]) -> Result<Response> {
    let mut cursor = std::io::Cursor::new(bytes);
    let resp = read_response(&mut cursor).map_err(|e| match e {
        Error::Io(io) => Error::format("response frame", io.to_string()),
        other => other,
    })?;
    if cursor.position() as usize != bytes.len() {
        return Err(Error::format("response frame", "trailing bytes"));
    }
    Ok(resp)
}

/// Serve requests until the client closes its end of the stream.
pub fn serve<R, W, F>(reader: R, mut writer: W, mut handler: F) -> Result<()>
where
    R: Read,
    W: Write,
    F: FnMut(u32, Tensor) -> std::result::Result<Tensor, String>,
{
    let mut reader = std::io::BufReader::new(reader);
    write_handshake(&mut writer)?;
    loop {
        if reader.fill_buf()?.is_empty() {
            return Ok(());
        }
        let req = read_request(&mut reader)?;
        let resp = match handler(req.t, req.x) {
            Ok(x) => Response::Ok(x),
            Err(msg) => Response::Err(msg),
        };
        write_response(&mut writer, &resp)?;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn request_round_trip() {
        let req = Request {
            t: 17,
            x: Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
        };
        let bytes = encode_request(&req).unwrap();
        assert_eq!(&bytes[..4], &17u32.to_le_bytes());
        assert_eq!(&bytes[4..8], b"DNFT");
        assert_eq!(decode_request(&bytes).unwrap(), req);
        assert_eq!(read_request(std::io::Cursor::new(bytes)).unwrap(), req);
    }

    #[test]
    fn response_round_trip() {
        let ok = Response::Ok(Tensor::scalar(3.0));
        assert_eq!(decode_response(&encode_response(&ok).unwrap()).unwrap(), ok);
        let err = Response::Err("model exploded".into());
        let bytes = encode_response(&err).unwrap();
        assert_eq!(bytes[0], 1);
        assert_eq!(decode_response(&bytes).unwrap(), err);
    }

    #[test]
    fn malformed_frames_rejected() {
        assert!(decode_request(&[1, 2]).is_err());
        assert!(decode_response(&[7]).is_err());
        assert!(decode_response(&[1, 255, 255, 255, 255]).is_err());
        assert!(decode_response(&[1, 1, 0, 0, 0, 0xff]).is_err());
        let mut ok = encode_response(&Response::Ok(Tensor::scalar(1.0))).unwrap();
        ok.push(9);
        assert!(decode_response(&ok).is_err());
    }

    #[test]
    fn handshake_checks() {
        assert!(read_handshake(&b"DNFP 1\n"[..]).is_ok());
        assert!(read_handshake(&b"DNFP 2\n"[..]).is_err());
        assert!(read_handshake(&b"DNFP 1"[..]).is_err());
        assert!(read_handshake(&[b'x'; 200][..]).is_err());
    }

    #[test]
    fn serve_answers_until_eof() {
        let mut input = Vec::new();
        for t in [1u32, 2] {
            input.extend(
                encode_request(&Request {
                    t,
                    x: Tensor::scalar(t as f64),
                })
                .unwrap(),
            );
        }
        let mut output = Vec::new();
        serve(&input[..], &mut output, |t, x| {
            if t == 1 {
                Ok(x.map(|v| v * 10.0))
            } else {
                Err("nope".into())
            }
        })
        .unwrap();
        assert!(output.starts_with(b"DNFP 1\n"));
        let mut c = std::io::Cursor::new(&output[HANDSHAKE.len() + 1..]);
        assert_eq!(read_response(&mut c).unwrap(), Response::Ok(Tensor::scalar(10.0)));
        assert_eq!(read_response(&mut c).unwrap(), Response::Err("nope".into()));
    }
}
