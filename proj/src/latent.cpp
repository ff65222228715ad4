// SPDX-License-Identifier: Apache-2.0
#include "gradlens/latent.hpp"

#include <algorithm>
#include <cmath>

#include "gradlens/errors.hpp"
#include "gradlens/rng.hpp"

namespace gradlens {

namespace {

std::size_t units_of(const Tensor& t) {
    std::size_t u = 1;
    for (std::size_t d = 1; d < t.rank(); ++d) u *= t.shape()[d];
    return u;
}

double metric_of(const TensorMap& outputs, const TargetSpec& target) {
    Tensor y = outputs.get(target.output_key);
    std::size_t batch = y.shape()[0];
    std::size_t per = units_of(y);
    double s = 0.0;
    if (target.seed) {
        if (!target.seed->shape_equals(y))
            throw ShapeError("metric seed shape " + target.seed->shape_str() + " does not match output " +
                             y.shape_str());
        s = target.seed->dot(y);
    } else {
        if (target.index >= per)
            throw ShapeError("metric index " + std::to_string(target.index) +
                             " out of range for per-sample size " + std::to_string(per));
        for (std::size_t n = 0; n < batch; ++n) s += y.data()[n * per + target.index];
    }
    return s / static_cast<double>(batch);
}

// Mean-of-batch metric seed: one backward computes the metric gradient.
Tensor metric_seed(const Tensor& output, const TargetSpec& target) {
    Tensor seed = target.seed ? *target.seed : one_hot_seed(output, target.index);
    return seed * (1.0 / static_cast<double>(output.shape()[0]));
}

// Solves (A + lambda I) X = B for SPD A via Cholesky; A is [n,n], B [n,m].
Tensor ridge_solve(const Tensor& a, const Tensor& b, double lambda) {
    std::size_t n = a.shape()[0], m = b.shape()[1];
    std::vector<double> l(n * n, 0.0);
    const double* ad = a.data();
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j <= i; ++j) {
            double s = ad[i * n + j] + (i == j ? lambda : 0.0);
            for (std::size_t k = 0; k < j; ++k) s -= l[i * n + k] * l[j * n + k];
            if (i == j) {
                if (s <= 0.0)
                    throw StateError("probe design matrix is singular; increase lambda");
                l[i * n + i] = std::sqrt(s);
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    Tensor x({n, m}, 0.0);
    double* xd = x.mutable_data();
    std::vector<double> col(n);
    for (std::size_t c = 0; c < m; ++c) {
        for (std::size_t i = 0; i < n; ++i) {
            double s = b.data()[i * m + c];
            for (std::size_t k = 0; k < i; ++k) s -= l[i * n + k] * col[k];
            col[i] = s / l[i * n + i];
        }
        for (std::size_t ii = n; ii > 0; --ii) {
            std::size_t i = ii - 1;
            double s = col[i];
            for (std::size_t k = i + 1; k < n; ++k) s -= l[k * n + i] * xd[k * m + c];
            xd[i * m + c] = s / l[i * n + i];
        }
    }
    return x;
}

struct R2 {
    double value = 0.0;
    bool defined = true;
};

R2 r_squared(const Tensor& x, const Tensor& y, const Tensor& w, const Tensor& intercept,
             const std::vector<std::size_t>& rows) {
    std::size_t units = x.shape()[1], targets = y.shape()[1];
    std::vector<double> mean(targets, 0.0);
    // Constant columns would leave SS_tot at zero; detect them exactly rather
    // than trusting the rounded mean.
    bool constant = true;
    for (std::size_t r : rows)
        for (std::size_t t = 0; t < targets; ++t) {
            double v = y.data()[r * targets + t];
            mean[t] += v;
            if (v != y.data()[rows.front() * targets + t]) constant = false;
        }
    for (auto& v : mean) v /= static_cast<double>(rows.size());

    double ss_res = 0.0, ss_tot = 0.0;
    for (std::size_t r : rows)
        for (std::size_t t = 0; t < targets; ++t) {
            double pred = intercept.data()[t];
            for (std::size_t u = 0; u < units; ++u)
                pred += x.data()[r * units + u] * w.data()[u * targets + t];
            double truth = y.data()[r * targets + t];
            ss_res += (truth - pred) * (truth - pred);
            ss_tot += (truth - mean[t]) * (truth - mean[t]);
        }
    if (constant || ss_tot == 0.0) return {0.0, false};
    return {1.0 - ss_res / ss_tot, true};
}

}  // namespace

const Tensor& ActivationStore::activations(const std::string& site) const {
    auto it = acts_.find(site);
    if (it == acts_.end()) throw KeyError("site '" + site + "' is not in the store");
    return it->second;
}

const std::vector<ActivationStore::Exemplar>& ActivationStore::top(const std::string& site,
                                                                   std::size_t unit) const {
    auto it = top_.find(site);
    if (it == top_.end()) throw KeyError("site '" + site + "' is not in the store");
    if (unit >= it->second.size())
        throw KeyError("unit " + std::to_string(unit) + " out of range for site '" + site + "'");
    return it->second[unit];
}

ActivationStore cache_activations(HookedModel& model, const std::vector<TensorMap>& dataset,
                                  const std::vector<std::string>& sites, std::size_t k) {
    if (k < 1) throw ConfigError("activation cache needs k >= 1");
    if (dataset.empty()) throw ConfigError("activation cache needs a nonempty dataset");

    ActivationStore store;
    store.sites_ = sites;
    store.k_ = k;
    std::unordered_map<std::string, std::vector<double>> rows;
    std::unordered_map<std::string, std::size_t> units;

    for (const auto& batch : dataset) {
        RunContext ctx(model);
        std::vector<CacheProxy> proxies;
        proxies.reserve(sites.size());
        for (const auto& site : sites) proxies.push_back(ctx.get(site, SiteKind::Output));
        ctx.run(batch);
        for (std::size_t s = 0; s < sites.size(); ++s) {
            const Tensor& h = proxies[s].value();
            std::size_t u = units_of(h);
            auto [it, inserted] = units.try_emplace(sites[s], u);
            if (!inserted && it->second != u)
                throw ShapeError("site '" + sites[s] + "' changed unit count across batches");
            auto& buf = rows[sites[s]];
            buf.insert(buf.end(), h.data(), h.data() + h.size());
        }
        store.samples_ += batch.get(batch.leaf_keys().front()).shape()[0];
    }

    for (const auto& site : sites) {
        std::size_t u = units[site];
        Tensor mat({store.samples_, u}, std::move(rows[site]));
        std::vector<std::vector<ActivationStore::Exemplar>> tops(u);
        std::size_t keep = std::min(k, store.samples_);
        std::vector<std::size_t> order(store.samples_);
        for (std::size_t unit = 0; unit < u; ++unit) {
            for (std::size_t i = 0; i < store.samples_; ++i) order[i] = i;
            std::partial_sort(order.begin(), order.begin() + keep, order.end(),
                              [&](std::size_t lhs, std::size_t rhs) {
                                  double lv = mat.data()[lhs * u + unit], rv = mat.data()[rhs * u + unit];
                                  if (lv != rv) return lv > rv;
                                  return lhs < rhs;
                              });
            tops[unit].reserve(keep);
            for (std::size_t i = 0; i < keep; ++i)
                tops[unit].push_back({mat.data()[order[i] * u + unit], order[i]});
        }
        store.acts_[site] = std::move(mat);
        store.top_[site] = std::move(tops);
    }
    return store;
}

ProbeReport fit_probe(const Tensor& activations, const Tensor& targets, double lambda,
                      std::uint64_t seed) {
    if (lambda < 0.0) throw ConfigError("ridge strength must be nonnegative");
    if (activations.rank() != 2 || targets.rank() != 2)
        throw ShapeError("probe expects [samples, units] activations and [samples, targets] targets");
    if (activations.shape()[0] != targets.shape()[0])
        throw ShapeError("activations and targets disagree on the sample count");

    std::size_t samples = activations.shape()[0];
    std::size_t units = activations.shape()[1], outs = targets.shape()[1];
    std::size_t n_test = samples / 5;
    std::size_t n_train = samples - n_test;
    if (n_train < 2 || n_test < 2)
        throw ConfigError("probe needs at least 2 samples in each split, got " + std::to_string(n_train) +
                          "/" + std::to_string(n_test));

    std::vector<std::size_t> order(samples);
    for (std::size_t i = 0; i < samples; ++i) order[i] = i;
    Rng rng(seed);
    rng.shuffle(order);
    std::vector<std::size_t> train(order.begin(), order.begin() + n_train);
    std::vector<std::size_t> test(order.begin() + n_train, order.end());

    // Centred ridge: (Xc' Xc + lambda I) W = Xc' Yc.
    std::vector<double> mx(units, 0.0), my(outs, 0.0);
    for (std::size_t r : train) {
        for (std::size_t u = 0; u < units; ++u) mx[u] += activations.data()[r * units + u];
        for (std::size_t t = 0; t < outs; ++t) my[t] += targets.data()[r * outs + t];
    }
    for (auto& v : mx) v /= static_cast<double>(n_train);
    for (auto& v : my) v /= static_cast<double>(n_train);

    Tensor xtx({units, units}, 0.0), xty({units, outs}, 0.0);
    double* ad = xtx.mutable_data();
    double* bd = xty.mutable_data();
    for (std::size_t r : train) {
        for (std::size_t u = 0; u < units; ++u) {
            double xu = activations.data()[r * units + u] - mx[u];
            for (std::size_t v = 0; v < units; ++v)
                ad[u * units + v] += xu * (activations.data()[r * units + v] - mx[v]);
            for (std::size_t t = 0; t < outs; ++t)
                bd[u * outs + t] += xu * (targets.data()[r * outs + t] - my[t]);
        }
    }

    ProbeReport report;
    report.lambda = lambda;
    report.weights = ridge_solve(xtx, xty, lambda);
    Tensor intercept({outs}, 0.0);
    double* id = intercept.mutable_data();
    for (std::size_t t = 0; t < outs; ++t) {
        double v = my[t];
        for (std::size_t u = 0; u < units; ++u) v -= mx[u] * report.weights.data()[u * outs + t];
        id[t] = v;
    }
    report.intercept = intercept;

    R2 tr = r_squared(activations, targets, report.weights, report.intercept, train);
    R2 te = r_squared(activations, targets, report.weights, report.intercept, test);
    report.r2_train = tr.value;
    report.r2_train_defined = tr.defined;
    report.r2_test = te.value;
    report.r2_test_defined = te.defined;
    return report;
}

ProbeReport fit_probe(const ActivationStore& store, const std::string& site, const Tensor& targets,
                      double lambda, std::uint64_t seed) {
    ProbeReport report = fit_probe(store.activations(site), targets, lambda, seed);
    report.site = site;
    return report;
}

Cav fit_cav(const Tensor& positives, const Tensor& negatives, const std::string& site, CavMethod method) {
    if (positives.rank() != 2 || negatives.rank() != 2)
        throw ShapeError("cav fitting expects [samples, units] matrices");
    if (positives.shape()[0] == 0 || negatives.shape()[0] == 0)
        throw ConfigError("cav fitting needs nonempty positive and negative sets");
    if (positives.shape()[1] != negatives.shape()[1])
        throw ShapeError("positive and negative activations disagree on unit count");

    std::size_t units = positives.shape()[1];
    std::size_t np = positives.shape()[0], nn = negatives.shape()[0];
    Tensor direction({units}, 0.0);
    double* dd = direction.mutable_data();

    if (method == CavMethod::MeanDifference) {
        for (std::size_t u = 0; u < units; ++u) {
            double mp = 0.0, mn = 0.0;
            for (std::size_t i = 0; i < np; ++i) mp += positives.data()[i * units + u];
            for (std::size_t i = 0; i < nn; ++i) mn += negatives.data()[i * units + u];
            dd[u] = mp / static_cast<double>(np) - mn / static_cast<double>(nn);
        }
    } else {
        // Plain-gradient logistic fit; the bias is tracked but only the
        // normal direction is kept.
        std::vector<double> w(units, 0.0);
        double b = 0.0;
        const double lr = 0.5;
        const std::size_t iters = 500;
        std::size_t total = np + nn;
        for (std::size_t it = 0; it < iters; ++it) {
            std::vector<double> gw(units, 0.0);
            double gb = 0.0;
            auto accumulate = [&](const Tensor& t, std::size_t count, double label) {
                for (std::size_t i = 0; i < count; ++i) {
                    double z = b;
                    for (std::size_t u = 0; u < units; ++u) z += w[u] * t.data()[i * units + u];
                    double p = 1.0 / (1.0 + std::exp(-z));
                    double err = p - label;
                    for (std::size_t u = 0; u < units; ++u) gw[u] += err * t.data()[i * units + u];
                    gb += err;
                }
            };
            accumulate(positives, np, 1.0);
            accumulate(negatives, nn, 0.0);
            for (std::size_t u = 0; u < units; ++u) w[u] -= lr * gw[u] / static_cast<double>(total);
            b -= lr * gb / static_cast<double>(total);
        }
        std::copy(w.begin(), w.end(), dd);
    }

    double norm = direction.norm2();
    if (norm == 0.0) throw StateError("cav direction is zero; the sets are indistinguishable");
    Cav cav;
    cav.site = site;
    cav.direction = direction * (1.0 / norm);
    cav.method = method;
    return cav;
}

double tcav_score(HookedModel& model, const std::vector<TensorMap>& dataset, const Cav& cav,
                  const TargetSpec& target) {
    if (dataset.empty()) throw ConfigError("tcav needs a nonempty dataset");

    std::size_t positive = 0, total = 0;
    for (const auto& batch : dataset) {
        TensorMap probe = forward(model.inner(), batch, false).outputs;
        Tensor seed = target.seed ? *target.seed : one_hot_seed(probe.get(target.output_key), target.index);

        RunContext ctx(model);
        CacheProxy grads = ctx.get(cav.site, SiteKind::GradOutput);
        TensorMap seeds;
        seeds.put(target.output_key, seed);
        ctx.seed_backward(seeds);
        ctx.run(batch);

        const Tensor& g = grads.value();
        std::size_t units = units_of(g);
        if (cav.direction.size() != units)
            throw ShapeError("cav has " + std::to_string(cav.direction.size()) + " units, site has " +
                             std::to_string(units));
        for (std::size_t n = 0; n < g.shape()[0]; ++n) {
            double dd = 0.0;
            for (std::size_t u = 0; u < units; ++u)
                dd += g.data()[n * units + u] * cav.direction.data()[u];
            if (dd > 0.0) ++positive;  // exact zeros count as non-positive
            ++total;
        }
    }
    return static_cast<double>(positive) / static_cast<double>(total);
}

PatchReport activation_patch(HookedModel& model, const TensorMap& clean, const TensorMap& corrupt,
                             const std::vector<std::string>& sites, const TargetSpec& metric) {
    if (!clean.structure_equals(corrupt))
        throw ShapeError("clean and corrupt inputs must be structurally identical");

    auto site_values = [&](const TensorMap& inputs) {
        RunContext ctx(model);
        std::vector<CacheProxy> proxies;
        for (const auto& site : sites) proxies.push_back(ctx.get(site, SiteKind::Output));
        ctx.run(inputs);
        std::vector<Tensor> values;
        for (auto& p : proxies) values.push_back(p.value());
        return values;
    };
    std::vector<Tensor> clean_h = site_values(clean);
    std::vector<Tensor> h_cor = site_values(corrupt);
    double base = metric_of(model.forward(corrupt), metric);

    PatchReport report;
    report.sites = sites;
    for (std::size_t s = 0; s < sites.size(); ++s) {
        std::size_t units = units_of(clean_h[s]);
        std::size_t batch = clean_h[s].shape()[0];
        Tensor effect({units}, 0.0);
        double* ed = effect.mutable_data();
        for (std::size_t u = 0; u < units; ++u) {
            // Replace one unit of the corrupt activation with its clean value
            // across the whole batch.
            Tensor hybrid = h_cor[s];
            double* hd = hybrid.mutable_data();
            for (std::size_t n = 0; n < batch; ++n)
                hd[n * units + u] = clean_h[s].data()[n * units + u];
            RunContext ctx(model);
            ctx.set(sites[s], SiteKind::Output, hybrid);
            ed[u] = metric_of(ctx.run(corrupt), metric) - base;
        }
        report.activation.push_back(std::move(effect));
    }
    return report;
}

PatchReport attribution_patch(HookedModel& model, const TensorMap& clean, const TensorMap& corrupt,
                              const std::vector<std::string>& sites, const TargetSpec& metric,
                              PatchMode mode, const LrpRules& rules) {
    PatchReport report = activation_patch(model, clean, corrupt, sites, metric);

    // Corrupt-side activations, forward only.
    std::vector<Tensor> h_cor;
    {
        RunContext ctx(model);
        std::vector<CacheProxy> proxies;
        for (const auto& site : sites) proxies.push_back(ctx.get(site, SiteKind::Output));
        ctx.run(corrupt);
        for (auto& p : proxies) h_cor.push_back(p.value());
    }

    // Pools every unit of every site into one column for the correlation.
    auto flatten = [](const std::vector<Tensor>& effects) {
        std::vector<double> flat;
        for (const Tensor& t : effects) flat.insert(flat.end(), t.data(), t.data() + t.size());
        return flat;
    };

    std::size_t batch = clean.get(clean.leaf_keys().front()).shape()[0];
    if (mode == PatchMode::Gradient) {
        // Clean run with one backward: gradient of the mean-batch metric.
        TensorMap probe = forward(model.inner(), clean, false).outputs;
        Tensor seed = metric_seed(probe.get(metric.output_key), metric);

        RunContext ctx(model);
        std::vector<CacheProxy> hs, gs;
        for (const auto& site : sites) {
            hs.push_back(ctx.get(site, SiteKind::Output));
            gs.push_back(ctx.get(site, SiteKind::GradOutput));
        }
        TensorMap seeds;
        seeds.put(metric.output_key, seed);
        ctx.seed_backward(seeds);
        ctx.run(clean);

        for (std::size_t s = 0; s < sites.size(); ++s) {
            const Tensor& h = hs[s].value();
            const Tensor& g = gs[s].value();
            std::size_t units = units_of(h);
            Tensor effect({units}, 0.0);
            double* ed = effect.mutable_data();
            for (std::size_t n = 0; n < h.shape()[0]; ++n)
                for (std::size_t u = 0; u < units; ++u) {
                    std::size_t i = n * units + u;
                    ed[u] += g.data()[i] * (h.data()[i] - h_cor[s].data()[i]);
                }
            report.gradient.push_back(std::move(effect));
        }
        report.pearson_gradient = pearson(flatten(report.gradient), flatten(report.activation));
    } else {
        // Relevance stands in for the gradient: per-unit R / h with an
        // epsilon guard against dead units.
        AttributionConfig cfg;
        cfg.target.output_key = metric.output_key;
        cfg.target.index = metric.index;
        cfg.target.seed = metric.seed;
        AttributionResult rel = lrp(model, clean, cfg, rules);

        std::vector<Tensor> h_clean;
        {
            RunContext ctx(model);
            std::vector<CacheProxy> proxies;
            for (const auto& site : sites) proxies.push_back(ctx.get(site, SiteKind::Output));
            ctx.run(clean);
            for (auto& p : proxies) h_clean.push_back(p.value());
        }

        for (std::size_t s = 0; s < sites.size(); ++s) {
            if (!rel.details.contains(sites[s]))
                throw KeyError("site '" + sites[s] + "' received no relevance");
            Tensor r = rel.details.get(sites[s]);
            const Tensor& h = h_clean[s];
            std::size_t units = units_of(h);
            Tensor effect({units}, 0.0);
            double* ed = effect.mutable_data();
            for (std::size_t n = 0; n < h.shape()[0]; ++n)
                for (std::size_t u = 0; u < units; ++u) {
                    std::size_t i = n * units + u;
                    double denom = h.data()[i] + (h.data()[i] < 0.0 ? -1e-9 : 1e-9);
                    ed[u] += r.data()[i] / denom * (h.data()[i] - h_cor[s].data()[i]);
                }
            for (std::size_t u = 0; u < units; ++u) ed[u] /= static_cast<double>(batch);
            report.relevance.push_back(std::move(effect));
        }
        report.pearson_relevance = pearson(flatten(report.relevance), flatten(report.activation));
    }
    return report;
}

Tensor steering_vector(HookedModel& model, const std::vector<TensorMap>& positives,
                       const std::vector<TensorMap>& negatives, const std::string& site) {
    if (positives.empty() || negatives.empty())
        throw ConfigError("steering needs nonempty positive and negative sets");

    auto mean_at_site = [&](const std::vector<TensorMap>& set) {
        std::vector<double> acc;
        std::size_t count = 0;
        for (const auto& batch : set) {
            RunContext ctx(model);
            CacheProxy h = ctx.get(site, SiteKind::Output);
            ctx.run(batch);
            const Tensor& v = h.value();
            std::size_t units = units_of(v);
            if (acc.empty()) acc.assign(units, 0.0);
            if (acc.size() != units) throw ShapeError("site '" + site + "' changed shape across batches");
            for (std::size_t n = 0; n < v.shape()[0]; ++n) {
                for (std::size_t u = 0; u < units; ++u) acc[u] += v.data()[n * units + u];
                ++count;
            }
        }
        for (auto& v : acc) v /= static_cast<double>(count);
        return acc;
    };

    std::vector<double> pos = mean_at_site(positives);
    std::vector<double> neg = mean_at_site(negatives);
    if (pos.size() != neg.size())
        throw ShapeError("positive and negative activations disagree on unit count");
    std::vector<double> diff(pos.size());
    for (std::size_t u = 0; u < pos.size(); ++u) diff[u] = pos[u] - neg[u];
    return Tensor({diff.size()}, diff);
}

std::uint64_t apply_steering(HookedModel& model, const std::string& site, const Tensor& vector,
                             double alpha) {
    Tensor v = vector;
    return model.register_hook(
        site, HookKind::Forward,
        [v, alpha](const std::string&, const TensorMap& payload) -> std::optional<TensorMap> {
            Tensor h = payload.get("output");
            std::size_t units = 1;
            for (std::size_t d = 1; d < h.rank(); ++d) units *= h.shape()[d];
            if (v.size() != units)
                throw ShapeError("steering vector has " + std::to_string(v.size()) + " units, site has " +
                                 std::to_string(units));
            Tensor shifted = h;
            double* sd = shifted.mutable_data();
            for (std::size_t n = 0; n < h.shape()[0]; ++n)
                for (std::size_t u = 0; u < units; ++u) sd[n * units + u] += alpha * v.data()[u];
            TensorMap out;
            out.put("output", shifted);
            return out;
        },
        HookScope::Persistent);
}

std::optional<double> pearson(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size() || a.size() < 2) return std::nullopt;
    double ma = 0.0, mb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ma += a[i];
        mb += b[i];
    }
    ma /= static_cast<double>(a.size());
    mb /= static_cast<double>(a.size());
    double cov = 0.0, va = 0.0, vb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        cov += (a[i] - ma) * (b[i] - mb);
        va += (a[i] - ma) * (a[i] - ma);
        vb += (b[i] - mb) * (b[i] - mb);
    }
    if (va == 0.0 || vb == 0.0) return std::nullopt;
    double r = cov / std::sqrt(va * vb);
    return std::clamp(r, -1.0, 1.0);
}

}  // namespace gradlens
