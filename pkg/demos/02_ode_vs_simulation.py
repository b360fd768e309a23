"""Does the scalar ODE actually describe training?

Start the model at the ansatz state (one head per eigen-direction, every
coordinate of the head equal to eps) and run population GD and first-order
SAM.  Along the way the active head should follow the reduced ODE
v' = lam^2 v (v - rho_hat) / tau with tau = 1/2 per unit eta * step.  We
compare the simulated v_i(t) with an RK4 solution of that ODE.

    python demos/02_ode_vs_simulation.py
"""

from sblab.experiments import run_ode_vs_simulation

rep = run_ode_vs_simulation(
    {"spectrum": {"eigenvalues": [1.0, 0.5, 0.25]}, "n_ctx": 32, "eps": 0.01, "rho": 0.005, "eta": 0.01}
)
for r in rep["rows"]:
    print(f"{r['arm']:3s} feature {r['feature']}  max relative error {r['max_rel_err']:.4f}")
print("all within tolerance:", rep["ok"])
