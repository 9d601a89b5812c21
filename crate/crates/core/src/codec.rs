//! Canonical byte encoding.
//!
//! Every hashed or signed value goes through this encoding. Integers are
//! fixed-width big-endian, floats are their IEEE-754 bit pattern, lists and
//! byte strings carry a `u32` length prefix, enums a one-byte tag. Field order
//! is the declaration order of each `Canonical` impl and must never change.

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error("unexpected end of input: needed {needed} more bytes")]
    UnexpectedEof { needed: usize },
    #[error("invalid tag {tag} for {ty}")]
    InvalidTag { ty: &'static str, tag: u8 },
    #[error("{0} trailing bytes after value")]
    TrailingBytes(usize),
    #[error("invalid value: {0}")]
    Invalid(&'static str),
}

/// Cursor over an encoded buffer.
pub struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8], DecodeError> {
        if self.buf.len() < n {
            return Err(DecodeError::UnexpectedEof {
                needed: n - self.buf.len(),
            });
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    pub fn take_array<const N: usize>(&mut self) -> Result<[u8; N], DecodeError> {
        let mut out = [0u8; N];
        out.copy_from_slice(self.take(N)?);
        Ok(out)
    }

    pub fn remaining(&self) -> usize {
        self.buf.len()
    }
}

pub trait Canonical: Sized {
    fn encode_to(&self, out: &mut Vec<u8>);

    fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError>;

    fn canonical_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.encode_to(&mut out);
        out
    }

    /// Decodes a complete buffer; trailing bytes are an error.
    fn from_canonical(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(bytes);
        let v = Self::decode_from(&mut r)?;
        match r.remaining() {
            0 => Ok(v),
            n => Err(DecodeError::TrailingBytes(n)),
        }
    }
}

macro_rules! int_impl {
    ($($t:ty),*) => {$(
        impl Canonical for $t {
            fn encode_to(&self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_be_bytes());
            }
            fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
                Ok(<$t>::from_be_bytes(r.take_array()?))
            }
        }
    )*};
}

int_impl!(u8, u16, u32, u64, i64);

impl Canonical for f64 {
    fn encode_to(&self, out: &mut Vec<u8>) {
        self.to_bits().encode_to(out);
    }
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(f64::from_bits(u64::decode_from(r)?))
    }
}

impl Canonical for bool {
    fn encode_to(&self, out: &mut Vec<u8>) {
        out.push(u8::from(*self));
    }
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        match u8::decode_from(r)? {
            0 => Ok(false),
            1 => Ok(true),
            tag => Err(DecodeError::InvalidTag { ty: "bool", tag }),
        }
    }
}

impl<const N: usize> Canonical for [u8; N] {
    fn encode_to(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(self);
    }
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        r.take_array()
    }
}

impl<T: Canonical> Canonical for Vec<T> {
    fn encode_to(&self, out: &mut Vec<u8>) {
        (self.len() as u32).encode_to(out);
        for item in self {
            item.encode_to(out);
        }
    }
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let len = u32::decode_from(r)? as usize;
        // Every element occupies at least one byte.
        if len > r.remaining() {
            return Err(DecodeError::UnexpectedEof {
                needed: len - r.remaining(),
            });
        }
        (0..len).map(|_| T::decode_from(r)).collect()
    }
}

impl<T: Canonical> Canonical for Option<T> {
    fn encode_to(&self, out: &mut Vec<u8>) {
        match self {
            None => out.push(0),
            Some(v) => {
                out.push(1);
                v.encode_to(out);
            }
        }
    }
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        match u8::decode_from(r)? {
            0 => Ok(None),
            1 => Ok(Some(T::decode_from(r)?)),
            tag => Err(DecodeError::InvalidTag { ty: "option", tag }),
        }
    }
}

impl<A: Canonical, B: Canonical> Canonical for (A, B) {
    fn encode_to(&self, out: &mut Vec<u8>) {
        self.0.encode_to(out);
        self.1.encode_to(out);
    }
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok((A::decode_from(r)?, B::decode_from(r)?))
    }
}

/// Implements [`Canonical`] for a struct by encoding the listed fields in order.
#[macro_export]
macro_rules! canonical_struct {
    ($ty:ident { $($field:ident),* $(,)? }) => {
        impl $crate::codec::Canonical for $ty {
            fn encode_to(&self, out: &mut Vec<u8>) {
                $( $crate::codec::Canonical::encode_to(&self.$field, out); )*
            }
            fn decode_from(
                r: &mut $crate::codec::Reader<'_>,
            ) -> Result<Self, $crate::codec::DecodeError> {
                Ok(Self {
                    $( $field: $crate::codec::Canonical::decode_from(r)?, )*
                })
            }
        }
    };
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn integers_are_big_endian_fixed_width() {
        assert_eq!(0x0102u16.canonical_bytes(), vec![1, 2]);
        assert_eq!(7u64.canonical_bytes(), vec![0, 0, 0, 0, 0, 0, 0, 7]);
    }

    #[test]
    fn lists_are_length_prefixed() {
        let v: Vec<u8> = vec![9, 8];
        assert_eq!(v.canonical_bytes(), vec![0, 0, 0, 2, 9, 8]);
    }

    #[test]
    fn trailing_bytes_rejected() {
        let err = u8::from_canonical(&[1, 2]).unwrap_err();
        assert_eq!(err, DecodeError::TrailingBytes(1));
    }

    #[test]
    fn truncated_input_rejected() {
        assert!(matches!(
            u32::from_canonical(&[0, 1]),
            Err(DecodeError::UnexpectedEof { needed: 2 })
        ));
        // length prefix claiming more elements than bytes remain
        assert!(Vec::<u8>::from_canonical(&[0, 0, 0, 9, 1]).is_err());
    }

    #[test]
    fn bad_bool_tag() {
        assert!(matches!(
            bool::from_canonical(&[2]),
            Err(DecodeError::InvalidTag { ty: "bool", tag: 2 })
        ));
    }
}
