//! Outcome probabilities from POVM tables, and the observable a projective
//! table defines.

use bohmian::experiments::povm::Outcome;
use bohmian::experiments::{observable_from_povm, povm_distribution, PovmTable};
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

fn projector(v: &DVector<Complex64>) -> DMatrix<Complex64> {
    v * v.adjoint()
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let psi = DVector::from_vec(vec![Complex64::new(0.6, 0.0), Complex64::new(0.0, 0.8)]);
    let sz = PovmTable::sigma_z();
    for (label, p) in sz.labels().zip(povm_distribution(&psi, &sz)?) {
        println!("σ_z {label}: {p:.4}");
    }

    let s = Complex64::new(0.5f64.sqrt(), 0.0);
    let plus = DVector::from_vec(vec![s, s]);
    let minus = DVector::from_vec(vec![s, -s]);
    let sx = PovmTable::new(vec![
        Outcome { label: "plus".into(), value: Some(1.0), operator: projector(&plus) },
        Outcome { label: "minus".into(), value: Some(-1.0), operator: projector(&minus) },
    ])?;
    for (label, p) in sx.labels().zip(povm_distribution(&psi, &sx)?) {
        println!("σ_x {label}: {p:.4}");
    }
    println!("observable of the σ_x table:{}", observable_from_povm(&sx)?);

    // an unsharp spin measurement: mixing σ_z projectors with efficiency 0.8
    let up = DMatrix::from_diagonal(&DVector::from_vec(vec![Complex64::new(0.9, 0.0), Complex64::new(0.1, 0.0)]));
    let down = DMatrix::identity(2, 2) - &up;
    let unsharp = PovmTable::new(vec![
        Outcome { label: "up".into(), value: Some(1.0), operator: up },
        Outcome { label: "down".into(), value: Some(-1.0), operator: down },
    ])?;
    for (label, p) in unsharp.labels().zip(povm_distribution(&psi, &unsharp)?) {
        println!("unsharp {label}: {p:.4}");
    }
    println!("unsharp table defines an observable: {}", observable_from_povm(&unsharp).is_ok());
    Ok(())
}
