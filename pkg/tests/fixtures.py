"""Hand-built data shared by several test modules."""

# five images, 19 detections: TPs, duplicates, misses, an ignored hit and
# an unmatched in-mask face
FIXTURE = [
    (
        [((0, 0, 10, 10), 0.95), ((0, 0, 10, 10), 0.40), ((30, 30, 40, 40), 0.81), ((60, 0, 70, 12), 0.12)],
        [(0, 0, 10, 10), (30, 31, 40, 41), (80, 80, 90, 90)],
        [True, True, True],
    ),
    (
        [((5, 5, 25, 25), 0.77), ((100, 100, 110, 110), 0.66), ((5, 6, 25, 26), 0.30)],
        [(5, 5, 25, 25), (100, 100, 109, 111)],
        [True, False],
    ),
    (
        [((0, 0, 8, 8), 0.58), ((20, 0, 28, 8), 0.57), ((40, 0, 48, 8), 0.56), ((60, 0, 68, 8), 0.05)],
        [(0, 0, 8, 8), (40, 1, 48, 9), (60, 0, 68, 9)],
        [True, True, True],
    ),
    (
        [((10, 10, 50, 50), 0.88), ((12, 12, 52, 52), 0.87), ((200, 200, 220, 220), 0.20)],
        [(10, 10, 50, 50), (200, 200, 230, 230)],
        [True, True],
    ),
    (
        [((0, 0, 30, 30), 0.99), ((31, 0, 61, 30), 0.45), ((0, 40, 30, 70), 0.33), ((90, 90, 95, 95), 0.01), ((31, 40, 61, 70), 0.70)],
        [(0, 0, 30, 30), (31, 0, 61, 30), (0, 40, 30, 70), (31, 40, 61, 70)],
        [True, False, True, True],
    ),
]
