LEXICON_HELP = {
    "strata": "Enumerate the stratification poset of the scenario's quotient or chart",
    "lattice": "Build the per-stratum separated lattices and verify property (P)",
    "build": "Build the initial equivariant section from averaged peak sections",
    "perturb": "Run the stratified perturbation and certify the final eta",
    "analyze": "Sample the zero set and run symplectic, invariance, topology and Morse checks",
    "profile": "Tabulate sup norms of a peak section over k_list",
    "report": "Collect all artifacts into one RunReport (JSON, text and plot data)",
}

LEXICON_MSG = {
    "report_header": "Donaldson suborbifold run: {preset}, k = {k}, mode = {mode}",
    "strata_line": "Strata: {count} (heights {heights}), see {artifact}",
    "lattices_line": "Lattices: {sizes} points, property (P) {status}, see {artifact}",
    "schedule_line": "Schedule: p = {p}, final log10 eta = {log10_eta:.2f}, see {artifact}",
    "certificate_line": "Certificate: {status} at eta = {eta:.3e}, see {artifact}",
    "zero_set_line": "Zero set: {points} points, {components} components, {orbits} orbits, see {artifact}",
    "winding_line": "Winding count: {winding} (refined zeros {points})",
    "symplectic_line": "Symplectic check: {status}, min |d s| - |dbar s| = {margin:.3e}",
    "morse_line": "Morse: {count} critical points, indices {indices}, index >= n {status}",
    "profile_line": "Profile: k in {ks}, dbar exponent {exponent}, see {artifact}",
    "missing_line": "{section}: not produced yet",
    "timing_line": "  {name}: {seconds:.2f} s",
    "ok": "ok",
    "failed": "FAILED",
    "done": "{verb} finished in {seconds:.2f} s, artifacts in {out}",
    "error": "{verb} failed: {error}",
}
