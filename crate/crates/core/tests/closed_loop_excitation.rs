//! The default reference, tracked by a proportional controller on the exact
//! state, shows up coherently in the joint motion at every injected tone.

use nalgebra::DVector;
use nnident::control::proportional_controller;
use nnident::plant::{excitation_reference, integrate_step, ExcitationSpec, PlantModel, PlantState};
use nnident::spectral::coherence_at;

#[test]
fn joint_motion_is_coherent_with_the_reference_at_injected_tones() {
    let plant = PlantModel::two_link();
    let spec = ExcitationSpec::default_for(2);
    let kp = DVector::from_vec(vec![40.0, 10.0]);
    let dt = 1e-3;
    let steps = 60_000;

    let mut state = PlantState::at_rest(excitation_reference(0.0, &spec).q);
    let mut refs = vec![Vec::with_capacity(steps); 2];
    let mut joints = vec![Vec::with_capacity(steps); 2];
    for _ in 0..steps {
        let r = excitation_reference(state.t, &spec);
        for i in 0..2 {
            refs[i].push(r.q[i]);
            joints[i].push(state.q[i]);
        }
        state = integrate_step(&plant, &state, |t, q, _| proportional_controller(q, &excitation_reference(t, &spec).q, &kp), dt)
            .expect("proportional loop stays finite");
    }

    for i in 0..2 {
        for f in spec.frequencies(i) {
            let c = coherence_at(&refs[i], &joints[i], 1.0 / dt, f, 10_000).unwrap();
            assert!(c > 0.9, "joint {i} at {f} Hz: coherence {c:.3}");
        }
    }
}
