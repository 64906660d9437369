use std::io::{Read, Write};

use crate::error::{Result, TensorError};

/// Storage precision tag. Arithmetic always runs in f64; `F32` only
/// affects how values are rounded and serialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DType {
    F32,
    #[default]
    F64,
}

impl DType {
    fn tag(self) -> u8 {
        match self {
            DType::F32 => 1,
            DType::F64 => 2,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            1 => Ok(DType::F32),
            2 => Ok(DType::F64),
            t => Err(TensorError::Format(format!("unknown dtype tag {t}"))),
        }
    }
}

/// Row-major dense tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    dtype: DType,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(TensorError::DataLength {
                len: data.len(),
                shape: shape.to_vec(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
            dtype: DType::F64,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
            dtype: DType::F64,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::full(&[], value)
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        let n = data.len();
        Self {
            shape: vec![n],
            data,
            dtype: DType::F64,
            requires_grad: false,
            grad: None,
        }
    }

    /// n×n identity.
    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        if !flag {
            self.grad = None;
        }
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Adds `g` into the gradient accumulator. Ignored when the tensor does
    /// not require grad.
    pub fn accumulate_grad(&mut self, g: &[f64]) -> Result<()> {
        if !self.requires_grad {
            return Ok(());
        }
        if g.len() != self.data.len() {
            return Err(TensorError::DataLength {
                len: g.len(),
                shape: self.shape.clone(),
            });
        }
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn grad_mut(&mut self) -> Option<&mut Vec<f64>> {
        self.grad.as_mut()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.data.len() {
            return Err(TensorError::DataLength {
                len: self.data.len(),
                shape: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Rounds stored values to the given precision and tags the tensor.
    pub fn to_dtype(mut self, dtype: DType) -> Self {
        if dtype == DType::F32 {
            self.data.iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
        self.dtype = dtype;
        self
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    /// Writes the little-endian blob:
    ///
    /// ```text
    /// magic   "FTSR"          4 bytes
    /// version u8 = 1
    /// dtype   u8              1 = f32, 2 = f64
    /// rank    u16
    /// dims    u64 × rank
    /// values  f32|f64 × product(dims), row-major
    /// ```
    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(b"FTSR")?;
        w.write_all(&[1u8, self.dtype.tag()])?;
        w.write_all(&(self.shape.len() as u16).to_le_bytes())?;
        for &d in &self.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        match self.dtype {
            DType::F64 => {
                for &v in &self.data {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
            DType::F32 => {
                for &v in &self.data {
                    w.write_all(&(v as f32).to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let io = |e: std::io::Error| TensorError::Format(e.to_string());
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != b"FTSR" {
            return Err(TensorError::Format("bad magic".into()));
        }
        let mut head = [0u8; 4];
        r.read_exact(&mut head).map_err(io)?;
        if head[0] != 1 {
            return Err(TensorError::Format(format!("unsupported version {}", head[0])));
        }
        let dtype = DType::from_tag(head[1])?;
        let rank = u16::from_le_bytes([head[2], head[3]]) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut b = [0u8; 8];
            r.read_exact(&mut b).map_err(io)?;
            shape.push(u64::from_le_bytes(b) as usize);
        }
        let n = numel(&shape);
        let mut data = Vec::with_capacity(n);
        match dtype {
            DType::F64 => {
                let mut b = [0u8; 8];
                for _ in 0..n {
                    r.read_exact(&mut b).map_err(io)?;
                    data.push(f64::from_le_bytes(b));
                }
            }
            DType::F32 => {
                let mut b = [0u8; 4];
                for _ in 0..n {
                    r.read_exact(&mut b).map_err(io)?;
                    data.push(f32::from_le_bytes(b) as f64);
                }
            }
        }
        Ok(Self {
            shape,
            data,
            dtype,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 8 * self.shape.len() + 8 * self.data.len());
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cursor = bytes;
        let t = Self::read_from(&mut cursor)?;
        if !cursor.is_empty() {
            return Err(TensorError::Format(format!("{} trailing bytes", cursor.len())));
        }
        Ok(t)
    }
}
