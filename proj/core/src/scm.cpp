#include "vlci/scm.hpp"

#include <cmath>
#include <sstream>

namespace vlci::scm {

namespace {

void check_rows(const std::vector<double>& table, int rows, int cols, const char* name, double tol) {
    for (int r = 0; r < rows; ++r) {
        KahanSum sum;
        for (int c = 0; c < cols; ++c) {
            const double p = table[static_cast<std::size_t>(r) * cols + c];
            if (p < 0.0) throw ShapeError(std::string(name) + ": negative probability");
            sum.add(p);
        }
        if (std::abs(sum.value() - 1.0) > tol) {
            throw ShapeError(std::string(name) + ": row " + std::to_string(r) + " sums to " +
                             std::to_string(sum.value()));
        }
    }
}

std::vector<double> dirichlet_row(Rng& rng, int n) {
    std::vector<double> row(static_cast<std::size_t>(n));
    double sum = 0.0;
    for (auto& v : row) {
        v = -std::log(1.0 - rng.uniform());
        sum += v;
    }
    for (auto& v : row) v /= sum;
    return row;
}

}  // namespace

void DiscreteSCM::validate(double tol) const {
    check_rows(p_z, 1, nz, "P(Z)", tol);
    check_rows(p_x_z, nz, nx, "P(X|Z)", tol);
    check_rows(p_m_x, nx, nm, "P(M|X)", tol);
    check_rows(p_y_mz, nm * nz, ny, "P(Y|M,Z)", tol);
}

DiscreteSCM random_scm(Rng& rng, const ScmSizes& sizes) {
    // [1, 6]: cardinality 1 admits the no-confounder collapse checks
    auto in_range = [](int v) { return v >= 1 && v <= 6; };
    if (!in_range(sizes.nz) || !in_range(sizes.nx) || !in_range(sizes.nm) || !in_range(sizes.ny)) {
        throw ConfigError("SCM cardinalities must lie in [1, 6]");
    }
    DiscreteSCM s;
    s.nz = sizes.nz;
    s.nx = sizes.nx;
    s.nm = sizes.nm;
    s.ny = sizes.ny;
    s.p_z = dirichlet_row(rng, s.nz);
    for (int z = 0; z < s.nz; ++z) {
        auto row = dirichlet_row(rng, s.nx);
        s.p_x_z.insert(s.p_x_z.end(), row.begin(), row.end());
    }
    for (int x = 0; x < s.nx; ++x) {
        auto row = dirichlet_row(rng, s.nm);
        s.p_m_x.insert(s.p_m_x.end(), row.begin(), row.end());
    }
    for (int m = 0; m < s.nm; ++m) {
        for (int z = 0; z < s.nz; ++z) {
            auto row = dirichlet_row(rng, s.ny);
            s.p_y_mz.insert(s.p_y_mz.end(), row.begin(), row.end());
        }
    }
    return s;
}

std::vector<double> observational(const DiscreteSCM& s, int x) {
    if (x < 0 || x >= s.nx) throw ShapeError("observational: x out of range");
    // P(z|x) via Bayes; conditioning requires P(X=x) > 0
    KahanSum px_acc;
    for (int z = 0; z < s.nz; ++z) px_acc.add(s.pxz(x, z) * s.pz(z));
    const double px = px_acc.value();
    if (px <= 0.0) throw ShapeError("observational: conditioning on a null event P(X=x)=0");

    std::vector<double> out(static_cast<std::size_t>(s.ny), 0.0);
    for (int y = 0; y < s.ny; ++y) {
        KahanSum acc;
        for (int z = 0; z < s.nz; ++z) {
            const double pz_x = s.pxz(x, z) * s.pz(z) / px;
            for (int m = 0; m < s.nm; ++m) {
                acc.add(s.pymz(y, m, z) * s.pmx(m, x) * pz_x);
            }
        }
        out[static_cast<std::size_t>(y)] = acc.value();
    }
    return out;
}

std::vector<double> truncated_do(const DiscreteSCM& s, int x) {
    if (x < 0 || x >= s.nx) throw ShapeError("truncated_do: x out of range");
    std::vector<double> out(static_cast<std::size_t>(s.ny), 0.0);
    for (int y = 0; y < s.ny; ++y) {
        KahanSum acc;
        for (int z = 0; z < s.nz; ++z) {
            for (int m = 0; m < s.nm; ++m) {
                acc.add(s.pz(z) * s.pmx(m, x) * s.pymz(y, m, z));
            }
        }
        out[static_cast<std::size_t>(y)] = acc.value();
    }
    return out;
}

std::vector<double> backdoor_adjust(const DiscreteSCM& s, int x) {
    if (x < 0 || x >= s.nx) throw ShapeError("backdoor_adjust: x out of range");
    std::vector<double> out(static_cast<std::size_t>(s.ny), 0.0);
    for (int y = 0; y < s.ny; ++y) {
        KahanSum acc;
        for (int z = 0; z < s.nz; ++z) {
            // P(y|x,z) marginalized through M, weighted by the prior P(z)
            KahanSum inner;
            for (int m = 0; m < s.nm; ++m) inner.add(s.pymz(y, m, z) * s.pmx(m, x));
            acc.add(inner.value() * s.pz(z));
        }
        out[static_cast<std::size_t>(y)] = acc.value();
    }
    return out;
}

std::vector<double> frontdoor_adjust(const DiscreteSCM& s, int x, int* skipped_zero_mass) {
    if (x < 0 || x >= s.nx) throw ShapeError("frontdoor_adjust: x out of range");
    if (skipped_zero_mass) *skipped_zero_mass = 0;

    // marginal P(X = x_hat); uses observational quantities only
    std::vector<double> px(static_cast<std::size_t>(s.nx), 0.0);
    for (int xh = 0; xh < s.nx; ++xh) {
        KahanSum acc;
        for (int z = 0; z < s.nz; ++z) acc.add(s.pxz(xh, z) * s.pz(z));
        px[static_cast<std::size_t>(xh)] = acc.value();
    }
    int skipped = 0;
    for (int xh = 0; xh < s.nx; ++xh) {
        if (px[static_cast<std::size_t>(xh)] <= 0.0) ++skipped;
    }
    if (skipped_zero_mass) *skipped_zero_mass = skipped;

    std::vector<double> out(static_cast<std::size_t>(s.ny), 0.0);
    for (int y = 0; y < s.ny; ++y) {
        KahanSum acc;
        for (int m = 0; m < s.nm; ++m) {
            KahanSum inner;  // sum over x_hat of P(x_hat) P(y | x_hat, m)
            for (int xh = 0; xh < s.nx; ++xh) {
                const double pxh = px[static_cast<std::size_t>(xh)];
                if (pxh <= 0.0) continue;  // measure-zero contribution
                KahanSum cond;  // P(y | x_hat, m) = sum_z P(y|m,z) P(z|x_hat)
                for (int z = 0; z < s.nz; ++z) {
                    cond.add(s.pymz(y, m, z) * (s.pxz(xh, z) * s.pz(z) / pxh));
                }
                inner.add(pxh * cond.value());
            }
            acc.add(s.pmx(m, x) * inner.value());
        }
        out[static_cast<std::size_t>(y)] = acc.value();
    }
    return out;
}

double total_variation(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) throw ShapeError("total_variation: size mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(a[i] - b[i]);
    return 0.5 * s;
}

VerifyReport scm_verify(std::uint64_t seed, int trials, const ScmSizes& sizes) {
    if (trials < 1) throw ConfigError("scm_verify: trials must be >= 1");
    Rng rng(seed);
    VerifyReport rep;
    rep.trials = trials;
    for (int t = 0; t < trials; ++t) {
        DiscreteSCM s = random_scm(rng, sizes);
        s.validate();
        for (int x = 0; x < s.nx; ++x) {
            const auto oracle = truncated_do(s, x);
            const auto fd = frontdoor_adjust(s, x);
            const auto bd = backdoor_adjust(s, x);
            for (int y = 0; y < s.ny; ++y) {
                rep.max_frontdoor_err =
                    std::max(rep.max_frontdoor_err,
                             std::abs(fd[static_cast<std::size_t>(y)] - oracle[static_cast<std::size_t>(y)]));
                rep.max_backdoor_err =
                    std::max(rep.max_backdoor_err,
                             std::abs(bd[static_cast<std::size_t>(y)] - oracle[static_cast<std::size_t>(y)]));
            }
        }
    }
    rep.pass = rep.max_frontdoor_err <= 1e-9 && rep.max_backdoor_err <= 1e-9;
    return rep;
}

std::string VerifyReport::text() const {
    std::ostringstream os;
    os << "scm-verify: trials=" << trials << "\n";
    os << "max |frontdoor - truncated_do| = " << max_frontdoor_err << "\n";
    os << "max |backdoor  - truncated_do| = " << max_backdoor_err << "\n";
    os << (pass ? "PASS" : "FAIL") << " (threshold 1e-9)\n";
    return os.str();
}

DiscreteSCM strongly_confounded_scm() {
    // near-deterministic x = z, y driven by z; observing X then proxies Z and
    // P(Y|x) departs far from P(Y|do(x))
    DiscreteSCM s;
    s.nz = s.nx = s.nm = s.ny = 2;
    s.p_z = {0.5, 0.5};
    s.p_x_z = {0.999, 0.001,   // z = 0
               0.001, 0.999};  // z = 1
    s.p_m_x = {0.9, 0.1,       // x = 0
               0.1, 0.9};      // x = 1
    // y mostly equals z regardless of m
    s.p_y_mz = {
        0.95, 0.05,  // m=0, z=0
        0.05, 0.95,  // m=0, z=1
        0.95, 0.05,  // m=1, z=0
        0.05, 0.95,  // m=1, z=1
    };
    return s;
}

}  // namespace vlci::scm
