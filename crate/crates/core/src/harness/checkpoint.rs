//! DCGN checkpoint files.
//!
//! Layout (little-endian):
//!
//! ```text
//! "DCGN"  version:u32
//! config_len:u32  config:utf8
//! param_count:u32     { name_len:u32 name:utf8 tensor:NTF1 }*
//! optimizer_count:u32 { name_len:u32 name:utf8 tensor:NTF1 }*
//! rng_seed:[u8;32] rng_stream:u64 rng_word_pos:u128
//! ```

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{decode_tensor_at, encode_tensor};
use crate::error::{Error, Result};
use crate::nn::ParamStore;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DCGN";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Serializable position of a ChaCha8 stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_text: String,
    pub params: ParamStore,
    pub optimizer: ParamStore,
    pub rng: RngState,
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&u32::try_from(v).expect("length fits u32").to_le_bytes());
}

fn put_table(out: &mut Vec<u8>, table: &ParamStore) {
    put_u32(out, table.len());
    for (name, t) in table.iter() {
        put_u32(out, name.len());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&encode_tensor(t));
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn err(&self, at: usize, message: impl Into<String>) -> Error {
        Error::Format {
            offset: at as u64,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err(self.bytes.len(), format!("truncated {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()) as usize)
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let len = self.u32(what)?;
        let at = self.pos;
        let raw = self.take(len, what)?;
        String::from_utf8(raw.to_vec()).map_err(|_| self.err(at, format!("{what} is not UTF-8")))
    }

    fn table(&mut self, what: &str) -> Result<ParamStore> {
        let count = self.u32(what)?;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let at = self.pos;
            let name = self.string(&format!("{what} entry name"))?;
            if store.contains(&name) {
                return Err(self.err(at, format!("duplicate {what} entry {name:?}")));
            }
            let (t, used) = decode_tensor_at(&self.bytes[self.pos..], self.pos)?;
            self.pos += used;
            store.insert(name, t);
        }
        Ok(store)
    }
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        put_u32(&mut out, self.config_text.len());
        out.extend_from_slice(self.config_text.as_bytes());
        put_table(&mut out, &self.params);
        put_table(&mut out, &self.optimizer);
        out.extend_from_slice(&self.rng.seed);
        out.extend_from_slice(&self.rng.stream.to_le_bytes());
        out.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut c = Cursor { bytes, pos: 0 };
        if c.take(4, "magic")? != CHECKPOINT_MAGIC {
            return Err(c.err(0, "bad magic, expected DCGN"));
        }
        let version = c.u32("version")?;
        if version != CHECKPOINT_VERSION as usize {
            return Err(c.err(4, format!("unsupported version {version}")));
        }
        let config_text = c.string("config")?;
        let params = c.table("parameter table")?;
        let optimizer = c.table("optimizer table")?;
        let seed: [u8; 32] = c.take(32, "rng seed")?.try_into().unwrap();
        let stream = u64::from_le_bytes(c.take(8, "rng stream")?.try_into().unwrap());
        let word_pos = u128::from_le_bytes(c.take(16, "rng position")?.try_into().unwrap());
        if c.pos != bytes.len() {
            return Err(c.err(c.pos, format!("{} trailing bytes", bytes.len() - c.pos)));
        }
        Ok(Self {
            config_text,
            params,
            optimizer,
            rng: RngState { seed, stream, word_pos },
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }
}
