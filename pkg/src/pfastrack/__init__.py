"""Safe planning with a planner-speed-parameterized tracking error bound.

Modules:
    dynamics     relative systems, Hamiltonian, bang-bang controls
    grid_solver  dynamic-programming value function per beta slice
    neural       sine-network value function trained on the VI residual
    value_teb    value sources, bound levels and radii, TEB tables
    environment  obstacle maps, sensing, dilation, random maps
    planning     grid A*, raw paths, speed-limited stepping
    online       the online planning/tracking loop
    bench        baselines, reports and SVG output
    cli          command line front end
"""

__version__ = "0.1.0"
