from enum import Enum


class Mode(str, Enum):
    TRAIN = "train"
    EVAL = "eval"
