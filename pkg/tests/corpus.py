"""Fixed inputs with values frozen from the reference computations in oracles.py."""

# (source weights, target weights, exact transport cost) on equal-width bins
# over [-1, 1], squared cost between bin centers. Costs from
# oracles.transport_lp_by_vertices; test_pseudo re-derives them.
OT_CORPUS = [
    ([1, 0], [0, 1], 1.000000000000),
    ([1, 1], [1, 1], 0.000000000000),
    ([3, 1], [1, 3], 0.500000000000),
    ([1, 2, 3], [3, 2, 1], 0.296296296296),
    ([1, 0, 1], [0, 1, 0], 0.444444444444),
    ([5, 1, 1], [1, 1, 5], 0.888888888889),
    ([2, 2, 1], [1, 3, 1], 0.088888888889),
    ([1, 2, 3, 4], [4, 3, 2, 1], 0.350000000000),
    ([1, 0, 0, 1], [1, 1, 1, 1], 0.125000000000),
    ([7, 1, 1, 1], [1, 1, 1, 7], 1.150000000000),
    ([3, 1, 4, 1], [5, 9, 2, 6], 0.114898989899),
    ([1, 1, 1, 1, 1], [5, 1, 1, 1, 2], 0.128000000000),
    ([2, 7, 1, 8, 2], [8, 1, 8, 2, 8], 0.102222222222),
    ([1, 0, 3, 0, 1], [0, 2, 0, 3, 0], 0.160000000000),
    ([6, 2, 1, 1, 0], [0, 1, 1, 2, 6], 1.248000000000),
    ([3, 3, 3, 3, 3], [1, 2, 3, 4, 5], 0.106666666667),
]
