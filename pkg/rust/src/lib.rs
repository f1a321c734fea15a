use ed25519_dalek::{Signature, VerifyingKey};
use pyo3::prelude::*;

/// Randomized batch check of Ed25519 signatures. True only if every item verifies.
#[pyfunction]
fn verify_batch(py: Python<'_>, items: Vec<(Vec<u8>, Vec<u8>, Vec<u8>)>) -> bool {
    py.detach(|| {
        let mut keys = Vec::with_capacity(items.len());
        let mut sigs = Vec::with_capacity(items.len());
        for (pk, sig, _) in &items {
            let Ok(pk) = <[u8; 32]>::try_from(pk.as_slice()) else { return false };
            let Ok(sig) = <[u8; 64]>::try_from(sig.as_slice()) else { return false };
            let Ok(key) = VerifyingKey::from_bytes(&pk) else { return false };
            keys.push(key);
            sigs.push(Signature::from_bytes(&sig));
        }
        let msgs: Vec<&[u8]> = items.iter().map(|(_, _, m)| m.as_slice()).collect();
        ed25519_dalek::verify_batch(&msgs, &sigs, &keys).is_ok()
    })
}

#[pymodule]
fn _edbatch(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(verify_batch, m)?)?;
    Ok(())
}
