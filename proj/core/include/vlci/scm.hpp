#pragma once

#include "vlci/common.hpp"

#include <array>
#include <string>
#include <vector>

namespace vlci::scm {

// Finite-support structural causal model on the fixed graph
// Z -> X, X -> M, M -> Y, Z -> Y (front-door criterion holds: M intercepts
// every X->Y path, X blocks Z's influence on M, and there is no direct
// X -> Y edge).
struct DiscreteSCM {
    int nz = 0, nx = 0, nm = 0, ny = 0;
    std::vector<double> p_z;    // |Z|
    std::vector<double> p_x_z;  // [z][x], row-stochastic over x
    std::vector<double> p_m_x;  // [x][m]
    std::vector<double> p_y_mz; // [m][z][y]

    double pz(int z) const { return p_z[static_cast<std::size_t>(z)]; }
    double pxz(int x, int z) const { return p_x_z[static_cast<std::size_t>(z) * nx + x]; }
    double pmx(int m, int x) const { return p_m_x[static_cast<std::size_t>(x) * nm + m]; }
    double pymz(int y, int m, int z) const {
        return p_y_mz[(static_cast<std::size_t>(m) * nz + z) * ny + y];
    }

    // every table row sums to 1 within tol and is nonnegative
    void validate(double tol = 1e-12) const;
};

struct ScmSizes {
    int nz = 2, nx = 2, nm = 2, ny = 2;
};

// Symmetric Dirichlet(1) rows; deterministic in the generator state.
DiscreteSCM random_scm(Rng& rng, const ScmSizes& sizes);

// P(Y | X = x): observational conditional, confounded through P(z|x).
std::vector<double> observational(const DiscreteSCM& scm, int x);

// P(Y | do(X = x)) by brute-force truncated factorization: the oracle.
std::vector<double> truncated_do(const DiscreteSCM& scm, int x);

// Back-door adjustment over Z.
std::vector<double> backdoor_adjust(const DiscreteSCM& scm, int x);

// Front-door adjustment through M, using observational quantities only.
// Terms with P(X = x_hat) = 0 are skipped; *skipped_zero_mass reports how
// many, when provided.
std::vector<double> frontdoor_adjust(const DiscreteSCM& scm, int x, int* skipped_zero_mass = nullptr);

struct VerifyReport {
    int trials = 0;
    double max_frontdoor_err = 0.0;
    double max_backdoor_err = 0.0;
    bool pass = false;
    std::string text() const;
};

// Front-door == truncated and back-door == truncated over random SCMs;
// pass iff both maxima are below 1e-9.
VerifyReport scm_verify(std::uint64_t seed, int trials, const ScmSizes& sizes);

// A hand-built strongly-confounded SCM whose observational conditional
// departs from the interventional one by a large total-variation gap.
DiscreteSCM strongly_confounded_scm();

double total_variation(const std::vector<double>& a, const std::vector<double>& b);

}  // namespace vlci::scm
