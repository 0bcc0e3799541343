//! Dense array kernels shared by graph recording, tape replay and the
//! numeric backward pass. Every kernel returns a standard-layout array.

use ndarray::{Array2, Axis, Zip};

use super::Shape;

pub(crate) fn broadcast_shape(a: Shape, b: Shape) -> Option<Shape> {
    fn dim(x: usize, y: usize) -> Option<usize> {
        if x == y || y == 1 {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else {
            None
        }
    }
    Some((dim(a.0, b.0)?, dim(a.1, b.1)?))
}

pub(crate) fn standard(a: Array2<f64>) -> Array2<f64> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}

pub(crate) fn zip_with(
    a: &Array2<f64>,
    b: &Array2<f64>,
    f: impl Fn(f64, f64) -> f64,
) -> Array2<f64> {
    let out = if a.dim() == b.dim() {
        Zip::from(a).and(b).map_collect(|&x, &y| f(x, y))
    } else {
        let shape = broadcast_shape(a.dim(), b.dim())
            .unwrap_or_else(|| panic!("cannot broadcast {:?} with {:?}", a.dim(), b.dim()));
        let av = a.broadcast(shape).expect("broadcast lhs");
        let bv = b.broadcast(shape).expect("broadcast rhs");
        Zip::from(&av).and(&bv).map_collect(|&x, &y| f(x, y))
    };
    standard(out)
}

pub(crate) fn select(cond: &Array2<f64>, a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let shape = cond.dim();
    let av = a
        .broadcast(shape)
        .expect("select: lhs does not broadcast to condition");
    let bv = b
        .broadcast(shape)
        .expect("select: rhs does not broadcast to condition");
    standard(
        Zip::from(cond)
            .and(&av)
            .and(&bv)
            .map_collect(|&c, &x, &y| if c > 0.0 { x } else { y }),
    )
}

pub(crate) fn sum_to(a: &Array2<f64>, shape: Shape) -> Array2<f64> {
    let mut out = a.clone();
    if shape.0 == 1 && out.nrows() != 1 {
        out = out.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    if shape.1 == 1 && out.ncols() != 1 {
        out = out.sum_axis(Axis(1)).insert_axis(Axis(1));
    }
    assert_eq!(
        out.dim(),
        shape,
        "sum_to: {:?} does not reduce to {:?}",
        a.dim(),
        shape
    );
    standard(out)
}

pub(crate) fn broadcast_to(a: &Array2<f64>, shape: Shape) -> Array2<f64> {
    if a.dim() == shape {
        return a.clone();
    }
    standard(
        a.broadcast(shape)
            .unwrap_or_else(|| panic!("broadcast_to: {:?} -> {:?}", a.dim(), shape))
            .to_owned(),
    )
}

pub(crate) fn slice(src: &Array2<f64>, offset: usize, shape: Shape) -> Array2<f64> {
    let len = shape.0 * shape.1;
    assert!(offset + len <= src.len(), "slice out of range");
    let flat = src.as_slice().expect("standard layout");
    Array2::from_shape_vec(shape, flat[offset..offset + len].to_vec()).expect("slice shape")
}

pub(crate) fn scatter(src: &Array2<f64>, offset: usize, shape: Shape) -> Array2<f64> {
    let mut out = Array2::zeros(shape);
    let len = src.len();
    assert!(offset + len <= out.len(), "scatter out of range");
    out.as_slice_mut().expect("fresh array")[offset..offset + len]
        .copy_from_slice(src.as_slice().expect("standard layout"));
    out
}

pub(crate) fn matmul(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    assert_eq!(
        a.ncols(),
        b.nrows(),
        "matmul: {:?} x {:?}",
        a.dim(),
        b.dim()
    );
    standard(a.dot(b))
}

pub(crate) fn transpose(a: &Array2<f64>) -> Array2<f64> {
    standard(a.t().to_owned())
}

pub(crate) fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}
