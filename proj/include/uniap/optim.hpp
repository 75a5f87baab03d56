#pragma once

#include <cmath>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "uniap/tensor.hpp"

namespace uniap::numkit {

enum class ParamKind { weight, bias };

template <typename T>
struct Param {
    std::string name;
    ParamKind kind = ParamKind::weight;
    Tensor<T> tensor;
};

template <typename T>
class ParamSet {
public:
    Tensor<T>& add(const std::string& name, ParamKind kind, Tensor<T> t) {
        if (index_.count(name))
            throw std::invalid_argument("duplicate parameter name: " + name);
        t.set_requires_grad(true);
        index_[name] = params_.size();
        params_.push_back(Param<T>{name, kind, std::move(t)});
        return params_.back().tensor;
    }

    bool contains(const std::string& name) const { return index_.count(name) > 0; }

    Param<T>& at(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end())
            throw std::invalid_argument("unknown parameter: " + name);
        return params_[it->second];
    }
    const Param<T>& at(const std::string& name) const {
        return const_cast<ParamSet*>(this)->at(name);
    }

    std::vector<Param<T>>& all() { return params_; }
    const std::vector<Param<T>>& all() const { return params_; }
    size_t size() const { return params_.size(); }

    void zero_grad() {
        for (auto& p : params_) p.tensor.zero_grad();
    }

    template <typename U>
    ParamSet<U> cast() const {
        ParamSet<U> out;
        for (const auto& p : params_)
            out.add(p.name, p.kind, p.tensor.template cast<U>());
        return out;
    }

private:
    std::vector<Param<T>> params_;
    std::map<std::string, size_t> index_;
};

// Poly schedule with linear warmup: 0 -> base_lr over warmup_iters, then
// base_lr * (1 - t)^power down to 0 at total_iters.
inline double poly_lr(long long iter, long long warmup_iters, long long total_iters,
                      double base_lr, double power = 0.9) {
    if (total_iters <= warmup_iters)
        throw std::invalid_argument("poly_lr: total_iters must exceed warmup_iters");
    if (iter < 0 || iter > total_iters)
        throw std::invalid_argument("poly_lr: iter out of range");
    if (iter < warmup_iters)
        return base_lr * static_cast<double>(iter) / static_cast<double>(warmup_iters);
    double t = static_cast<double>(iter - warmup_iters) /
               static_cast<double>(total_iters - warmup_iters);
    return base_lr * std::pow(1.0 - t, power);
}

// Adam with bias correction. The mask selects which parameters a step may
// touch; masked-out parameters and their moments stay bit-identical.
template <typename T>
class Adam {
public:
    Adam(T beta1 = T(0.9), T beta2 = T(0.999), T eps = T(1e-8))
        : beta1_(beta1), beta2_(beta2), eps_(eps) {}

    void step(ParamSet<T>& params, double lr, const std::vector<bool>& mask) {
        if (mask.size() != params.size())
            throw std::invalid_argument("adam: mask size mismatch");
        if (m_.empty()) init_state(params);
        if (m_.size() != params.size())
            throw std::invalid_argument("adam: state/param count mismatch");
        ++t_;
        T bc1 = T(1) - std::pow(beta1_, static_cast<T>(t_));
        T bc2 = T(1) - std::pow(beta2_, static_cast<T>(t_));
        for (size_t pi = 0; pi < params.all().size(); ++pi) {
            if (!mask[pi]) continue;
            auto& p = params.all()[pi];
            auto g = p.tensor.grad();
            auto v = p.tensor.mutable_value();
            if (m_[pi].size() != v.size())
                throw std::invalid_argument("adam: shape mismatch for " + p.name);
            for (size_t i = 0; i < v.size(); ++i) {
                m_[pi][i] = beta1_ * m_[pi][i] + (T(1) - beta1_) * g[i];
                v_[pi][i] = beta2_ * v_[pi][i] + (T(1) - beta2_) * g[i] * g[i];
                T mhat = m_[pi][i] / bc1;
                T vhat = v_[pi][i] / bc2;
                v[i] -= static_cast<T>(lr) * mhat / (std::sqrt(vhat) + eps_);
            }
        }
    }

    void step(ParamSet<T>& params, double lr) {
        step(params, lr, std::vector<bool>(params.size(), true));
    }

    long long iterations() const { return t_; }

private:
    void init_state(const ParamSet<T>& params) {
        m_.resize(params.size());
        v_.resize(params.size());
        for (size_t i = 0; i < params.size(); ++i) {
            m_[i].assign(params.all()[i].tensor.numel(), T(0));
            v_[i].assign(params.all()[i].tensor.numel(), T(0));
        }
    }

    T beta1_, beta2_, eps_;
    long long t_ = 0;
    std::vector<std::vector<T>> m_, v_;
};

}  // namespace uniap::numkit
