use crate::error::{Error, Result};
use crate::knn::KdTree;
use crate::mesh::Vec3;

/// Symmetric Chamfer value `½(mean_a d²(a, B) + mean_b d²(b, A))` and its
/// gradient with respect to the points of `a`.
#[derive(Debug, Clone)]
pub struct Chamfer {
    pub value: f64,
    pub grad: Vec<Vec3>,
}

/// Nearest-neighbour pairing in both directions: `a_to_b[i]` is the point of
/// `b` closest to `a[i]`, and vice versa.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Correspondence {
    pub a_to_b: Vec<usize>,
    pub b_to_a: Vec<usize>,
}

pub fn correspondences(a: &[Vec3], b: &[Vec3]) -> Result<Correspondence> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidArgument("chamfer of an empty point set".into()));
    }
    let (ta, tb) = (KdTree::new(a), KdTree::new(b));
    Ok(Correspondence {
        a_to_b: a.iter().map(|p| tb.nearest(p).0).collect(),
        b_to_a: b.iter().map(|p| ta.nearest(p).0).collect(),
    })
}

pub fn chamfer(a: &[Vec3], b: &[Vec3]) -> Result<Chamfer> {
    let c = correspondences(a, b)?;
    chamfer_frozen(a, b, &c)
}

/// Chamfer with the pairing held fixed; smooth in `a`, and equal to
/// [`chamfer`] when `corr` is the current nearest-neighbour pairing.
pub fn chamfer_frozen(a: &[Vec3], b: &[Vec3], corr: &Correspondence) -> Result<Chamfer> {
    if corr.a_to_b.len() != a.len() || corr.b_to_a.len() != b.len() {
        return Err(Error::DimensionMismatch("correspondence does not fit the point sets".into()));
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let mut grad = vec![Vec3::zeros(); a.len()];
    let mut sa = 0.0;
    for (i, &j) in corr.a_to_b.iter().enumerate() {
        let d = a[i] - b[j];
        sa += d.norm_squared();
        grad[i] += d / na;
    }
    let mut sb = 0.0;
    for (j, &i) in corr.b_to_a.iter().enumerate() {
        let d = a[i] - b[j];
        sb += d.norm_squared();
        grad[i] += d / nb;
    }
    Ok(Chamfer {
        value: 0.5 * (sa / na + sb / nb),
        grad,
    })
}
