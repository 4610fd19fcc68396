use super::NnError;

/// Dense row-major `f64` array with an optional gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Tensor, NnError> {
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(NnError::ShapeMismatch(format!(
                "shape {shape:?} needs {expected} values, got {}",
                values.len()
            )));
        }
        Ok(Tensor {
            shape,
            values,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        Tensor {
            shape,
            values: vec![0.0; n],
            grad: None,
        }
    }

    pub fn full(shape: Vec<usize>, v: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor {
            shape,
            values: vec![v; n],
            grad: None,
        }
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor {
            shape: vec![1, 1],
            values: vec![v],
            grad: None,
        }
    }

    pub fn row(values: Vec<f64>) -> Tensor {
        Tensor {
            shape: vec![1, values.len()],
            values,
            grad: None,
        }
    }

    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Result<Tensor, NnError> {
        Tensor::new(vec![rows, cols], values)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Leading dimensions flattened; a vector is a single row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[..self.shape.len() - 1].iter().product(),
        }
    }

    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn item(&self) -> f64 {
        self.values[0]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols() + c]
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn accumulate_grad(&mut self, g: &[f64]) -> Result<(), NnError> {
        if g.len() != self.values.len() {
            return Err(NnError::ShapeMismatch(format!(
                "gradient of {} values for tensor {:?}",
                g.len(),
                self.shape
            )));
        }
        match &mut self.grad {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(b, x)| *b += x),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }
}
