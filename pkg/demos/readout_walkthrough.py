"""Drive, measure and reset one qubit in |+>, printing what each stage does.

Run with ``python3 demos/readout_walkthrough.py`` (about a minute).
"""

from math import sqrt

import numpy as np

from jpmreadout.analysis import analytic_ideal_fidelity, dephasing_factor, reset_error
from jpmreadout.model import PulseSchedule, SystemParams
from jpmreadout.protocol import run_drive_stage, run_measurement_stage, run_reset_stage


def main():
    p = SystemParams()
    sched = PulseSchedule.from_params(p)
    plus = (1 / sqrt(2), 1 / sqrt(2))

    drive = run_drive_stage(p, plus, schedule=sched)
    n0, n1 = drive.occupation[-1]
    print(f"drive for {sched.t_d * 1e9:.0f} ns: <n> = {n0:.2e} (qubit 0), {n1:.3f} (qubit 1)")
    print(f"  dephasing factor D = {dephasing_factor(drive.alpha0, drive.alpha1):.2e}")
    print(f"  ideal-detector process fidelity = {analytic_ideal_fidelity(drive.alpha0, drive.alpha1):.6f}")

    rec = run_measurement_stage(drive, p, schedule=sched)
    print(f"measure for {p.t_m * 1e9:.0f} ns: click probability {rec.click_probability:.4f}")
    with np.printoptions(precision=4, suppress=True):
        print("  qubit | click:\n", rec.rho_click)
        print("  qubit | no click:\n", rec.rho_noclick)

    rec = run_reset_stage(rec, p, schedule=sched)
    print(f"reset with |alpha_M|^2 = {abs(rec.alpha_m) ** 2:.3f}: "
          f"residual <n> = {rec.residual_photons[1]:.3f}, vacuum infidelity {rec.reset_error[1]:.3f}")
    print(f"  closed form for one ideal subtraction: {reset_error(drive.alpha1, 1):.2e}")


if __name__ == "__main__":
    main()
