"""Per-fold and printed average rows of the published result tables.

Column order: accuracy, precision, specificity, recall, f1, balanced accuracy.
"""

TABLE1_FOLDS = [
    (0.978, 0.978, 0.978, 0.978, 0.978, 0.978),
    (0.989, 0.978, 1.000, 1.000, 0.988, 1.000),
    (1.000, 1.000, 1.000, 1.000, 1.000, 1.000),
    (0.989, 0.978, 1.000, 1.000, 0.988, 1.000),
    (1.000, 1.000, 1.000, 1.000, 1.000, 1.000),
]
TABLE1_AVERAGE = (0.992, 0.987, 0.996, 0.996, 0.991, 0.996)

TABLE2_FOLDS = [
    (0.987, 0.978, 1.000, 1.000, 0.992, 1.000),
    (0.974, 0.976, 0.976, 0.976, 0.972, 0.976),
    (0.974, 0.976, 0.976, 0.976, 0.972, 0.976),
    (0.987, 0.978, 1.000, 1.000, 0.992, 1.000),
    (0.987, 0.978, 1.000, 1.000, 0.992, 1.000),
]
TABLE2_AVERAGE = (0.980, 0.977, 0.990, 0.990, 0.984, 0.990)

TABLE3_FOLDS = [
    (0.974, 0.976, 0.976, 0.976, 0.972, 0.976),
    (1.000, 1.000, 1.000, 1.000, 1.000, 1.000),
    (0.978, 0.978, 1.000, 1.000, 0.992, 1.000),
    (1.000, 1.000, 1.000, 1.000, 1.000, 1.000),
    (0.989, 0.978, 1.000, 1.000, 0.988, 1.000),
]
TABLE3_AVERAGE = (0.988, 0.987, 0.996, 0.996, 0.991, 0.996)
TABLE3_IMPROVEMENT = ("0.8 %", "1.0 %", "0.6 %", "0.6 %", "0.7 %", "0.6 %")

TABLE4_TEACHER = 49_222_390
TABLE4_STUDENT = 2_334_966
TABLE4_REDUCTION = "-95.3 %"
