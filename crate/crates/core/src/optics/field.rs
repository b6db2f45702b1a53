use num_complex::Complex64;

/// Complex amplitude on a plane, stored as separate `f32` real and
/// imaginary grids (row-major).
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexField {
    height: usize,
    width: usize,
    re: Vec<f32>,
    im: Vec<f32>,
    pitch: f64,
}

impl ComplexField {
    pub fn zeros(height: usize, width: usize, pitch: f64) -> Self {
        ComplexField {
            height,
            width,
            re: vec![0.0; height * width],
            im: vec![0.0; height * width],
            pitch,
        }
    }

    pub fn from_parts(height: usize, width: usize, pitch: f64, re: Vec<f32>, im: Vec<f32>) -> Self {
        assert_eq!(re.len(), height * width);
        assert_eq!(im.len(), height * width);
        ComplexField {
            height,
            width,
            re,
            im,
            pitch,
        }
    }

    pub fn from_complex(height: usize, width: usize, pitch: f64, data: &[Complex64]) -> Self {
        ComplexField {
            height,
            width,
            re: data.iter().map(|c| c.re as f32).collect(),
            im: data.iter().map(|c| c.im as f32).collect(),
            pitch,
        }
    }

    pub fn to_complex(&self) -> Vec<Complex64> {
        self.re
            .iter()
            .zip(&self.im)
            .map(|(&r, &i)| Complex64::new(r as f64, i as f64))
            .collect()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pitch(&self) -> f64 {
        self.pitch
    }

    pub fn re(&self) -> &[f32] {
        &self.re
    }

    pub fn im(&self) -> &[f32] {
        &self.im
    }

    pub fn get(&self, row: usize, col: usize) -> Complex64 {
        let i = row * self.width + col;
        Complex64::new(self.re[i] as f64, self.im[i] as f64)
    }

    pub fn set(&mut self, row: usize, col: usize, value: Complex64) {
        let i = row * self.width + col;
        self.re[i] = value.re as f32;
        self.im[i] = value.im as f32;
    }

    /// Σ(re² + im²), accumulated in f64.
    pub fn energy(&self) -> f64 {
        self.re
            .iter()
            .zip(&self.im)
            .map(|(&r, &i)| (r as f64).powi(2) + (i as f64).powi(2))
            .sum()
    }

    pub fn intensity(&self) -> Vec<f64> {
        self.re
            .iter()
            .zip(&self.im)
            .map(|(&r, &i)| (r as f64).powi(2) + (i as f64).powi(2))
            .collect()
    }

    pub fn max_abs_diff(&self, other: &ComplexField) -> f64 {
        self.to_complex()
            .iter()
            .zip(other.to_complex())
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
    }
}
