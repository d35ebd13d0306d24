class CensLVMException(Exception):
    """
    Base class for every error raised by censlvm.
    """
    pass


class ModelSyntaxException(CensLVMException):
    """
    Capture where in a model description the parser gave up.
    """

    def __init__(self, message: str, line: int = 0, column: int = 0):
        self.line = line
        self.column = column
        super().__init__(f"line {line}, column {column}: {message}")


class ModelSpecificationException(CensLVMException):
    """
    A syntactically valid model that cannot be estimated as written
    (self-loops, duplicate edges, free binary variances, ...).
    """
    pass


class ParameterMapException(CensLVMException):
    """
    Capture info about which label or cell could not be mapped onto the
    free parameter vector.
    """
    pass


class CovarianceException(CensLVMException):
    """
    A covariance matrix is not positive definite or is too badly conditioned
    to be used. Usually a sign that the model is not identified.
    """
    pass


class DegeneratePatternException(CensLVMException):
    """
    The probability of an observed censoring pattern underflowed.
    """

    def __init__(self, message: str, row: int = None):
        self.row = row
        super().__init__(message)


class DataException(CensLVMException):
    """
    Capture info about which column or row of a dataset does not match
    the model.
    """
    pass


class NonIdentifiedException(CensLVMException):
    """
    Singular information matrix, or composite blocks that do not reach
    every free parameter.
    """
    pass


class EstimationException(CensLVMException):
    """
    Capture info about which part of the estimation process went bad.
    """
    pass


class IntegrationException(CensLVMException):
    """
    A multivariate normal probability could not be computed to its error
    target within the allowed number of lattice points.
    """
    pass
