"""Services: training phases, reference solver, metrics, persistence, tables and figures."""
