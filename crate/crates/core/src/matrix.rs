use num_complex::Complex64;

/// Dense complex matrix stored column by column, so that one pulse (one
/// slow-time column) is contiguous.
#[derive(Debug, Clone, PartialEq)]
pub struct ColumnMatrix {
    rows: usize,
    cols: usize,
    data: Vec<Complex64>,
}

impl ColumnMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        ColumnMatrix {
            rows,
            cols,
            data: vec![Complex64::new(0.0, 0.0); rows * cols],
        }
    }

    pub fn from_columns(rows: usize, cols: usize, data: Vec<Complex64>) -> Self {
        assert_eq!(data.len(), rows * cols, "column data length");
        ColumnMatrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn column(&self, c: usize) -> &[Complex64] {
        &self.data[c * self.rows..(c + 1) * self.rows]
    }

    pub fn column_mut(&mut self, c: usize) -> &mut [Complex64] {
        &mut self.data[c * self.rows..(c + 1) * self.rows]
    }

    pub fn get(&self, row: usize, col: usize) -> Complex64 {
        self.data[col * self.rows + row]
    }

    pub fn as_slice(&self) -> &[Complex64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    /// Mutable iterator over columns, suitable for `par_chunks_mut`.
    pub fn columns_mut(&mut self) -> std::slice::ChunksMut<'_, Complex64> {
        self.data.chunks_mut(self.rows.max(1))
    }
}
