#include "gbgn/gradcheck.hpp"

#include "kernels.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

namespace gbgn {

namespace {

// Hash of the active-branch pattern of every kinked primitive on the tape.
// Two replays with equal signatures evaluated the same smooth piece.
uint64_t kink_signature(const Tape& tape) {
    uint64_t sig = 1469598103934665603ull;
    auto mix = [&sig](uint64_t v) {
        sig ^= v;
        sig *= 1099511628211ull;
    };
    for (int i = 0; i < tape.node_count(); ++i) {
        const ValueId id{i};
        if (tape.is_leaf(id)) continue;
        const OpKind k = tape.kind(id);
        if (k == OpKind::Relu) {
            const Tensor& x = tape.value(tape.inputs(id)[0]);
            for (double v : x.data) mix(v > 0.0 ? 2 : (v == 0.0 ? 3 : 1));
        } else if (k == OpKind::BilinearWarp1d) {
            const auto in = tape.inputs(id);
            const Tensor& img = tape.value(in[0]);
            const Tensor& d = tape.value(in[1]);
            const int64_t w = img.shape.back();
            const int64_t rows = d.size() / w;
            for (int64_t r = 0; r < rows; ++r)
                for (int64_t x = 0; x < w; ++x) {
                    const auto cell =
                        kernels::warp_cell(static_cast<double>(x) - d[r * w + x], w);
                    mix(static_cast<uint64_t>(cell.x0 * 4) + (cell.clamped ? 1 : 0) +
                        (cell.f == 1.0 ? 2 : 0));
                }
        }
    }
    return sig;
}

std::vector<int64_t> select_elements(int64_t size, int64_t limit, uint64_t seed) {
    std::vector<int64_t> idx(static_cast<size_t>(size));
    for (int64_t i = 0; i < size; ++i) idx[static_cast<size_t>(i)] = i;
    if (limit <= 0 || size <= limit) return idx;
    std::mt19937_64 rng(seed);
    for (int64_t i = 0; i < limit; ++i) {
        const int64_t j = i + static_cast<int64_t>(rng() % static_cast<uint64_t>(size - i));
        std::swap(idx[static_cast<size_t>(i)], idx[static_cast<size_t>(j)]);
    }
    idx.resize(static_cast<size_t>(limit));
    std::sort(idx.begin(), idx.end());
    return idx;
}

} // namespace

std::string GradCheckReport::summary() const {
    std::ostringstream os;
    os << (pass ? "PASS" : "FAIL") << " max_rel_err=" << max_rel_err << " tol=" << tol;
    if (!worst_param.empty()) os << " worst=" << worst_param;
    int64_t kinks = 0;
    for (const auto& e : entries) kinks += e.kink_excluded;
    if (kinks) os << " kink_excluded=" << kinks;
    return os.str();
}

GradCheckReport finite_diff_check(Tape& tape, ValueId root, double h, double tol,
                                  int64_t max_elements_per_param, uint64_t select_seed) {
    if (h <= 0.0 || tol <= 0.0) throw ContractViolation("finite_diff_check requires h > 0 and tol > 0");
    const ParamRegistry* reg = tape.registry();
    if (!reg) throw ContractViolation("finite_diff_check requires a tape with a parameter registry");
    if (tape.value(root).size() != 1)
        throw ContractViolation("finite_diff_check root must be scalar");

    const Gradients analytic = tape.backward(root);

    // Slots bound to each parameter (usually one).
    std::vector<std::vector<ValueId>> slots(static_cast<size_t>(reg->count()));
    for (int i = 0; i < tape.node_count(); ++i) {
        const int pi = tape.param_index(ValueId{i});
        if (pi >= 0) slots[static_cast<size_t>(pi)].push_back(ValueId{i});
    }

    GradCheckReport report;
    report.tol = tol;
    for (int p = 0; p < reg->count(); ++p) {
        const auto& entry = reg->entry(p);
        GradCheckEntry e;
        e.param = entry.name;
        if (slots[static_cast<size_t>(p)].empty()) {
            report.entries.push_back(std::move(e));
            continue;
        }
        const auto idx = select_elements(entry.value.size(), max_elements_per_param,
                                         select_seed ^ (0x9e3779b97f4a7c15ull * (p + 1)));
        for (int64_t j : idx) {
            const double base = tape.value(slots[static_cast<size_t>(p)][0])[j];
            auto eval = [&](double v) {
                for (ValueId s : slots[static_cast<size_t>(p)]) tape.leaf_value(s)[j] = v;
                tape.replay();
                return std::pair<double, uint64_t>(tape.value(root)[0], kink_signature(tape));
            };
            const auto [fp, sigp] = eval(base + h);
            const auto [fm, sigm] = eval(base - h);
            for (ValueId s : slots[static_cast<size_t>(p)]) tape.leaf_value(s)[j] = base;
            if (sigp != sigm) {
                ++e.kink_excluded;
                continue;
            }
            const double fd = (fp - fm) / (2.0 * h);
            const double a = analytic[static_cast<size_t>(entry.offset + j)];
            const double rel = std::abs(fd - a) / std::max({std::abs(fd), std::abs(a), 1.0});
            ++e.checked;
            if (rel > e.max_rel_err) e.max_rel_err = rel;
        }
        if (e.max_rel_err > report.max_rel_err) {
            report.max_rel_err = e.max_rel_err;
            report.worst_param = e.param;
        }
        report.entries.push_back(std::move(e));
    }
    tape.replay(); // restore unperturbed values
    report.pass = report.max_rel_err <= tol;
    return report;
}

} // namespace gbgn
