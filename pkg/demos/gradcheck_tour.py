"""The tape's adjoints against central differences, and a negative control.

First the tiny FASA block is checked in full. Then the softmax adjoint is
deliberately scaled by 1.5 and the same check has to fail.
"""
from fatnet.gradcheck import check, corrupt_adjoint, fasa_problem

problem = fasa_problem()
print(check(problem).format_text())

with corrupt_adjoint("softmax", 1.5):
    broken = check(problem, max_per_tensor=8)
print()
print(broken.format_text().splitlines()[-1])
