#include <pybind11/pybind11.h>
PYBIND11_MODULE(_mbil, m) { m.attr("__placeholder__") = true; }
