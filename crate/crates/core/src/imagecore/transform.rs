use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on the upper-left 2x2 determinant below which a transform is singular.
pub const SINGULAR_EPS: f64 = 1e-12;

/// Degrees of freedom of a planar transform, ordered from most to least restricted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformModel {
    Translation,
    Similarity,
    Affine,
    Homography,
}

impl TransformModel {
    /// Correspondences needed to determine the model.
    pub fn min_samples(self) -> usize {
        match self {
            TransformModel::Translation => 1,
            TransformModel::Similarity => 2,
            TransformModel::Affine => 3,
            TransformModel::Homography => 4,
        }
    }
}

/// 3x3 projective matrix tagged with the model it was built as.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transform2D {
    pub model: TransformModel,
    #[serde(with = "row_major")]
    pub m: [[f64; 3]; 3],
}

mod row_major {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &[[f64; 3]; 3], s: S) -> Result<S::Ok, S::Error> {
        let flat: Vec<f64> = m.iter().flatten().copied().collect();
        flat.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<[[f64; 3]; 3], D::Error> {
        let flat = Vec::<f64>::deserialize(d)?;
        if flat.len() != 9 {
            return Err(serde::de::Error::invalid_length(flat.len(), &"9 elements"));
        }
        Ok([
            [flat[0], flat[1], flat[2]],
            [flat[3], flat[4], flat[5]],
            [flat[6], flat[7], flat[8]],
        ])
    }
}

impl Default for Transform2D {
    fn default() -> Self {
        Self::identity()
    }
}

impl Transform2D {
    pub fn identity() -> Self {
        Self::translation(0.0, 0.0)
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self {
            model: TransformModel::Translation,
            m: [[1.0, 0.0, tx], [0.0, 1.0, ty], [0.0, 0.0, 1.0]],
        }
    }

    /// Uniform scale about the origin.
    pub fn scale(s: f64) -> Self {
        Self::similarity(s, 0.0, 0.0, 0.0)
    }

    /// `x' = s R(theta) x + t`.
    pub fn similarity(scale: f64, theta: f64, tx: f64, ty: f64) -> Self {
        let (sin, cos) = theta.sin_cos();
        let a = scale * cos;
        let b = scale * sin;
        Self {
            model: TransformModel::Similarity,
            m: [[a, -b, tx], [b, a, ty], [0.0, 0.0, 1.0]],
        }
    }

    /// From the top two rows `[[a, b, tx], [c, d, ty]]`.
    pub fn affine(rows: [[f64; 3]; 2]) -> Self {
        Self {
            model: TransformModel::Affine,
            m: [rows[0], rows[1], [0.0, 0.0, 1.0]],
        }
    }

    /// General projective matrix, normalized so `m[2][2] == 1` when possible.
    pub fn homography(mut m: [[f64; 3]; 3]) -> Self {
        let s = m[2][2];
        if s.abs() > 1e-15 {
            for row in m.iter_mut() {
                for v in row.iter_mut() {
                    *v /= s;
                }
            }
        }
        Self {
            model: TransformModel::Homography,
            m,
        }
    }

    /// Builds a transform of the given model from a raw matrix, enforcing the model's structure.
    pub fn from_matrix(model: TransformModel, m: [[f64; 3]; 3]) -> Self {
        match model {
            TransformModel::Homography => Self::homography(m),
            _ => Self {
                model,
                m: [m[0], m[1], [0.0, 0.0, 1.0]],
            },
        }
    }

    pub fn det2(&self) -> f64 {
        self.m[0][0] * self.m[1][1] - self.m[0][1] * self.m[1][0]
    }

    pub fn det3(&self) -> f64 {
        let m = &self.m;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    pub fn is_singular(&self) -> bool {
        match self.model {
            TransformModel::Homography => self.det3().abs() < SINGULAR_EPS,
            _ => self.det2().abs() < SINGULAR_EPS,
        }
    }

    pub fn translation_part(&self) -> (f64, f64) {
        (self.m[0][2], self.m[1][2])
    }

    #[inline]
    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let m = &self.m;
        let u = m[0][0] * x + m[0][1] * y + m[0][2];
        let v = m[1][0] * x + m[1][1] * y + m[1][2];
        if self.model == TransformModel::Homography {
            let w = m[2][0] * x + m[2][1] * y + m[2][2];
            (u / w, v / w)
        } else {
            (u, v)
        }
    }

    /// `self · other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &Transform2D) -> Transform2D {
        let mut out = [[0.0; 3]; 3];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (0..3).map(|k| self.m[i][k] * other.m[k][j]).sum();
            }
        }
        let model = self.model.max(other.model);
        if model == TransformModel::Homography {
            Transform2D { model, m: out }
        } else {
            Transform2D::from_matrix(model, out)
        }
    }

    pub fn invert(&self) -> Result<Transform2D> {
        if self.is_singular() {
            let det = match self.model {
                TransformModel::Homography => self.det3(),
                _ => self.det2(),
            };
            return Err(Error::SingularTransform(det));
        }
        let m = &self.m;
        if self.model != TransformModel::Homography {
            let det = self.det2();
            let a = m[1][1] / det;
            let b = -m[0][1] / det;
            let c = -m[1][0] / det;
            let d = m[0][0] / det;
            let tx = -(a * m[0][2] + b * m[1][2]);
            let ty = -(c * m[0][2] + d * m[1][2]);
            return Ok(Transform2D::from_matrix(
                self.model,
                [[a, b, tx], [c, d, ty], [0.0, 0.0, 1.0]],
            ));
        }
        let det = self.det3();
        let inv = [
            [
                (m[1][1] * m[2][2] - m[1][2] * m[2][1]) / det,
                (m[0][2] * m[2][1] - m[0][1] * m[2][2]) / det,
                (m[0][1] * m[1][2] - m[0][2] * m[1][1]) / det,
            ],
            [
                (m[1][2] * m[2][0] - m[1][0] * m[2][2]) / det,
                (m[0][0] * m[2][2] - m[0][2] * m[2][0]) / det,
                (m[0][2] * m[1][0] - m[0][0] * m[1][2]) / det,
            ],
            [
                (m[1][0] * m[2][1] - m[1][1] * m[2][0]) / det,
                (m[0][1] * m[2][0] - m[0][0] * m[2][1]) / det,
                (m[0][0] * m[1][1] - m[0][1] * m[1][0]) / det,
            ],
        ];
        Ok(Transform2D::homography(inv))
    }

    /// Largest absolute elementwise difference.
    pub fn max_abs_diff(&self, other: &Transform2D) -> f64 {
        let mut d: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                d = d.max((self.m[i][j] - other.m[i][j]).abs());
            }
        }
        d
    }

    /// Maps the corners of a `w x h` pixel grid (pixel centers).
    pub fn map_corners(&self, w: u32, h: u32) -> [(f64, f64); 4] {
        let (xm, ym) = ((w - 1) as f64, (h - 1) as f64);
        [
            self.apply(0.0, 0.0),
            self.apply(xm, 0.0),
            self.apply(xm, ym),
            self.apply(0.0, ym),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn matmul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
        let mut out = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..3 {
                    out[i][j] += a[i][k] * b[k][j];
                }
            }
        }
        out
    }

    fn arb_affine() -> impl Strategy<Value = Transform2D> {
        (
            0.5f64..2.0,
            -1.0f64..1.0,
            -0.2f64..0.2,
            -0.2f64..0.2,
            -100.0f64..100.0,
            -100.0f64..100.0,
        )
            .prop_map(|(s, th, sh1, sh2, tx, ty)| {
                let (sin, cos) = th.sin_cos();
                Transform2D::affine([
                    [s * cos + sh1, -s * sin, tx],
                    [s * sin, s * cos + sh2, ty],
                ])
            })
    }

    #[test]
    fn translations_compose() {
        let t = Transform2D::translation(1.0, 2.0).compose(&Transform2D::translation(3.0, 4.0));
        assert_eq!(t, Transform2D::translation(4.0, 6.0));
    }

    #[test]
    fn compose_with_inverse_is_identity() {
        let t = Transform2D::affine([[1.02, 0.01, 40.0], [-0.01, 0.99, 12.0]]);
        let id = t.compose(&t.invert().unwrap());
        assert!(id.max_abs_diff(&Transform2D::identity()) < 1e-9);
        let h = Transform2D::homography([[1.1, 0.02, 5.0], [0.01, 0.95, -3.0], [1e-4, -2e-4, 1.0]]);
        let id = h.invert().unwrap().compose(&h);
        let id = Transform2D::homography(id.m);
        assert!(id.max_abs_diff(&Transform2D::identity()) < 1e-9);
    }

    #[test]
    fn chain_of_five_matches_matrix_product() {
        let ts = [
            Transform2D::affine([[1.1, 0.2, 3.0], [-0.1, 0.9, 7.0]]),
            Transform2D::affine([[0.8, -0.3, -12.0], [0.25, 1.2, 4.5]]),
            Transform2D::affine([[1.0, 0.05, 100.0], [0.0, 1.0, -50.0]]),
            Transform2D::affine([[0.97, 0.1, 0.5], [-0.12, 1.03, 2.0]]),
            Transform2D::affine([[2.0, 0.0, -1.0], [0.0, 0.5, 1.0]]),
        ];
        let composed = ts
            .iter()
            .skip(1)
            .fold(ts[0], |acc, t| acc.compose(t));
        let mut direct = ts[0].m;
        for t in &ts[1..] {
            direct = matmul(&direct, &t.m);
        }
        for i in 0..3 {
            for j in 0..3 {
                assert!((composed.m[i][j] - direct[i][j]).abs() < 1e-9);
            }
        }
        assert_eq!(composed.model, TransformModel::Affine);
    }

    #[test]
    fn compose_takes_most_general_model() {
        let t = Transform2D::translation(1.0, 1.0).compose(&Transform2D::similarity(1.1, 0.1, 0.0, 0.0));
        assert_eq!(t.model, TransformModel::Similarity);
    }

    #[test]
    fn singular_inverse_fails() {
        let t = Transform2D::affine([[1.0, 2.0, 0.0], [2.0, 4.0, 0.0]]);
        assert!(matches!(t.invert(), Err(Error::SingularTransform(_))));
    }

    #[test]
    fn serializes_row_major() {
        let t = Transform2D::translation(5.0, 3.0);
        let s = serde_json::to_string(&t).unwrap();
        assert_eq!(
            s,
            r#"{"model":"translation","m":[1.0,0.0,5.0,0.0,1.0,3.0,0.0,0.0,1.0]}"#
        );
        let back: Transform2D = serde_json::from_str(&s).unwrap();
        assert_eq!(back, t);
    }

    proptest! {
        #[test]
        fn compose_is_associative(a in arb_affine(), b in arb_affine(), c in arb_affine()) {
            let l = a.compose(&b).compose(&c);
            let r = a.compose(&b.compose(&c));
            prop_assert!(l.max_abs_diff(&r) < 1e-9);
        }

        #[test]
        fn identity_is_two_sided_unit(a in arb_affine()) {
            let id = Transform2D::identity();
            prop_assert!(a.compose(&id).max_abs_diff(&a) < 1e-12);
            prop_assert!(id.compose(&a).max_abs_diff(&a) < 1e-12);
        }

        #[test]
        fn double_inverse_round_trips(a in arb_affine()) {
            let back = a.invert().unwrap().invert().unwrap();
            prop_assert!(back.max_abs_diff(&a) < 1e-9);
        }
    }
}
