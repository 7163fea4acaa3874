# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled surface-distance kernels. Mirrors _distkern_np; keep in sync."""

from libc.math cimport sqrt, INFINITY

import numpy as np

cimport numpy as cnp

cnp.import_array()


cdef inline bint _surf3(const cnp.uint8_t[:, :, ::1] m,
                        Py_ssize_t z, Py_ssize_t y, Py_ssize_t x,
                        Py_ssize_t nz, Py_ssize_t ny, Py_ssize_t nx) noexcept nogil:
    if z == 0 or m[z - 1, y, x] == 0:
        return True
    if z == nz - 1 or m[z + 1, y, x] == 0:
        return True
    if y == 0 or m[z, y - 1, x] == 0:
        return True
    if y == ny - 1 or m[z, y + 1, x] == 0:
        return True
    if x == 0 or m[z, y, x - 1] == 0:
        return True
    if x == nx - 1 or m[z, y, x + 1] == 0:
        return True
    return False


def surface_coords_3d(const cnp.uint8_t[:, :, ::1] m):
    cdef Py_ssize_t nz = m.shape[0], ny = m.shape[1], nx = m.shape[2]
    cdef Py_ssize_t z, y, x, n = 0
    for z in range(nz):
        for y in range(ny):
            for x in range(nx):
                if m[z, y, x] != 0 and _surf3(m, z, y, x, nz, ny, nx):
                    n += 1
    out = np.empty((n, 3), dtype=np.int64)
    cdef cnp.int64_t[:, ::1] ov = out
    cdef Py_ssize_t i = 0
    for z in range(nz):
        for y in range(ny):
            for x in range(nx):
                if m[z, y, x] != 0 and _surf3(m, z, y, x, nz, ny, nx):
                    ov[i, 0] = z
                    ov[i, 1] = y
                    ov[i, 2] = x
                    i += 1
    return out


cdef inline bint _surf2(const cnp.uint8_t[:, ::1] m,
                        Py_ssize_t y, Py_ssize_t x,
                        Py_ssize_t ny, Py_ssize_t nx) noexcept nogil:
    if y == 0 or m[y - 1, x] == 0:
        return True
    if y == ny - 1 or m[y + 1, x] == 0:
        return True
    if x == 0 or m[y, x - 1] == 0:
        return True
    if x == nx - 1 or m[y, x + 1] == 0:
        return True
    return False


def surface_coords_2d(const cnp.uint8_t[:, ::1] m):
    cdef Py_ssize_t ny = m.shape[0], nx = m.shape[1]
    cdef Py_ssize_t y, x, n = 0
    for y in range(ny):
        for x in range(nx):
            if m[y, x] != 0 and _surf2(m, y, x, ny, nx):
                n += 1
    out = np.empty((n, 2), dtype=np.int64)
    cdef cnp.int64_t[:, ::1] ov = out
    cdef Py_ssize_t i = 0
    for y in range(ny):
        for x in range(nx):
            if m[y, x] != 0 and _surf2(m, y, x, ny, nx):
                ov[i, 0] = y
                ov[i, 1] = x
                i += 1
    return out


def nn_dists_3d(const cnp.int64_t[:, ::1] a, const cnp.int64_t[:, ::1] b,
                double sz, double sy, double sx):
    cdef Py_ssize_t na = a.shape[0], nb = b.shape[0], i, j
    out = np.empty(na, dtype=np.float64)
    cdef double[::1] ov = out
    cdef double best, dz, dy, dx, d2
    with nogil:
        for i in range(na):
            best = INFINITY
            for j in range(nb):
                dz = (a[i, 0] - b[j, 0]) * sz
                dy = (a[i, 1] - b[j, 1]) * sy
                dx = (a[i, 2] - b[j, 2]) * sx
                d2 = dz * dz + dy * dy + dx * dx
                if d2 < best:
                    best = d2
            ov[i] = sqrt(best)
    return out


def nn_dists_2d(const cnp.int64_t[:, ::1] a, const cnp.int64_t[:, ::1] b,
                double sy, double sx):
    cdef Py_ssize_t na = a.shape[0], nb = b.shape[0], i, j
    out = np.empty(na, dtype=np.float64)
    cdef double[::1] ov = out
    cdef double best, dy, dx, d2
    with nogil:
        for i in range(na):
            best = INFINITY
            for j in range(nb):
                dy = (a[i, 0] - b[j, 0]) * sy
                dx = (a[i, 1] - b[j, 1]) * sx
                d2 = dy * dy + dx * dx
                if d2 < best:
                    best = d2
            ov[i] = sqrt(best)
    return out
