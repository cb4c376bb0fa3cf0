//! Temporally averaged teacher network.

use crate::error::{HliError, Result};
use crate::model::ModelParams;

/// Teacher parameters maintained as an exponential moving average of the
/// student. The teacher never receives gradients; it is only ever written
/// through [`ema_update`].
#[derive(Debug, Clone)]
pub struct TeacherState {
    pub params: ModelParams,
    pub momentum: f64,
    pub step: usize,
}

/// Start the teacher as an independent copy of the student.
pub fn init_teacher(student: &ModelParams, momentum: f64) -> TeacherState {
    TeacherState {
        params: student.clone(),
        momentum,
        step: 0,
    }
}

/// One EMA step: theta_T <- m * theta_T + (1 - m) * theta_S, elementwise.
pub fn ema_update(teacher: &mut TeacherState, student: &ModelParams) -> Result<()> {
    if !teacher.params.same_schema(student) {
        return Err(HliError::ShapeMismatch(
            "teacher/student parameter schemas differ".into(),
        ));
    }
    let m = teacher.momentum;
    for (t, s) in teacher
        .params
        .tensors_mut()
        .iter_mut()
        .zip(student.tensors())
    {
        ndarray::Zip::from(t).and(s).for_each(|tv, &sv| {
            *tv = m * *tv + (1.0 - m) * sv;
        });
    }
    teacher.step += 1;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny() -> ModelConfig {
        ModelConfig {
            input_h: 8,
            input_w: 8,
            in_channels: 2,
            block_channels: vec![3, 4],
            num_classes: 3,
        }
    }

    #[test]
    fn init_is_independent_copy_at_step_zero() {
        let mut student = ModelParams::init(&tiny(), 0).unwrap();
        let teacher = init_teacher(&student, 0.999);
        assert_eq!(teacher.step, 0);
        for (a, b) in teacher.params.tensors().iter().zip(student.tensors()) {
            assert_eq!(a, b);
        }
        // Mutating the student leaves the teacher unchanged.
        student.get_mut("head.b").fill(5.0);
        assert!(teacher.params.get("head.b").iter().all(|&v| v == 0.0));
    }

    #[test]
    fn momentum_extremes() {
        let student = ModelParams::init(&tiny(), 1).unwrap();
        let other = ModelParams::init(&tiny(), 2).unwrap();

        let mut t = init_teacher(&student, 1.0);
        ema_update(&mut t, &other).unwrap();
        for (a, b) in t.params.tensors().iter().zip(student.tensors()) {
            assert_eq!(a, b);
        }

        let mut t = init_teacher(&student, 0.0);
        ema_update(&mut t, &other).unwrap();
        for (a, b) in t.params.tensors().iter().zip(other.tensors()) {
            assert_eq!(a, b);
        }
        assert_eq!(t.step, 1);
    }

    #[test]
    fn constant_student_matches_geometric_closed_form() {
        let student = ModelParams::init(&tiny(), 3).unwrap();
        let init = ModelParams::init(&tiny(), 4).unwrap();
        let m = 0.9;
        let mut teacher = init_teacher(&init, m);
        let steps = 50;
        for _ in 0..steps {
            ema_update(&mut teacher, &student).unwrap();
        }
        let mt = m_pow(m, steps);
        for ((t, t0), s) in teacher
            .params
            .tensors()
            .iter()
            .zip(init.tensors())
            .zip(student.tensors())
        {
            for ((tv, t0v), sv) in t.iter().zip(t0.iter()).zip(s.iter()) {
                let expect = mt * t0v + (1.0 - mt) * sv;
                assert!((tv - expect).abs() < 1e-10);
            }
        }
    }

    fn m_pow(m: f64, t: usize) -> f64 {
        // Repeated multiplication, matching the update recursion exactly.
        let mut acc = 1.0;
        for _ in 0..t {
            acc *= m;
        }
        acc
    }

    #[test]
    fn update_is_convex_combination() {
        let student = ModelParams::init(&tiny(), 5).unwrap();
        let mut teacher = init_teacher(&ModelParams::init(&tiny(), 6).unwrap(), 0.7);
        let before = teacher.params.clone();
        ema_update(&mut teacher, &student).unwrap();
        for ((t, t0), s) in teacher
            .params
            .tensors()
            .iter()
            .zip(before.tensors())
            .zip(student.tensors())
        {
            for ((tv, t0v), sv) in t.iter().zip(t0.iter()).zip(s.iter()) {
                let lo = t0v.min(*sv) - 1e-15;
                let hi = t0v.max(*sv) + 1e-15;
                assert!(*tv >= lo && *tv <= hi);
            }
        }
    }

    #[test]
    fn rejects_schema_mismatch() {
        let student = ModelParams::init(&tiny(), 7).unwrap();
        let mut other_cfg = tiny();
        other_cfg.num_classes = 5;
        let other = ModelParams::init(&other_cfg, 7).unwrap();
        let mut teacher = init_teacher(&student, 0.999);
        assert!(ema_update(&mut teacher, &other).is_err());
    }
}
