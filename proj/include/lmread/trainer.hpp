#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "lmread/autodiff.hpp"
#include "lmread/common.hpp"
#include "lmread/corpus.hpp"
#include "lmread/lm.hpp"

namespace lmread {

inline double default_initial_lr(ModelKind kind) {
    return kind == ModelKind::gru ? 0.02 : 0.005;
}

struct TrainConfig {
    ArchitectureSpec spec;
    double initial_lr = 0.0;  // 0 -> architecture default
    double momentum = 0.9;
    int epochs = 2;
    int batch_size = 10;
    std::vector<std::uint64_t> checkpoint_ladder;  // sentence counts, strictly increasing
    std::uint64_t seed = 0;

    void validate(std::size_t corpus_size) const {
        if (initial_lr < 0.0) throw input_error("TrainConfig: initial_lr must be positive");
        if (epochs < 1) throw input_error("TrainConfig: epochs must be >= 1");
        if (batch_size < 1) throw input_error("TrainConfig: batch_size must be >= 1");
        for (std::size_t i = 0; i < checkpoint_ladder.size(); ++i) {
            if (i > 0 && checkpoint_ladder[i] <= checkpoint_ladder[i - 1])
                throw input_error("TrainConfig: checkpoint ladder must be strictly increasing");
            if (checkpoint_ladder[i] > corpus_size * static_cast<std::uint64_t>(epochs))
                throw input_error("TrainConfig: ladder point beyond corpus_size * epochs");
        }
    }
};

struct TrainRun {
    TrainConfig config;
    std::vector<ModelCheckpoint> checkpoints;
    std::vector<double> loss_trace;  // per-batch mean cross-entropy
};

// Piecewise learning-rate schedule: the initial rate is halved after 1/3,
// 2/3 and all of the first epoch's sentences, then kept constant.
inline double lr_at(std::uint64_t sentences_seen, std::uint64_t corpus_size, double initial_lr) {
    if (corpus_size == 0) throw input_error("lr_at: corpus_size must be positive");
    if (sentences_seen * 3 < corpus_size) return initial_lr;
    if (sentences_seen * 3 < 2 * corpus_size) return initial_lr / 2.0;
    if (sentences_seen < corpus_size) return initial_lr / 4.0;
    return initial_lr / 8.0;
}

// Classical momentum: v <- momentum*v + g; p <- p - lr*v.
inline void sgd_momentum_step(Mat& param, const Mat& grad, Mat& velocity, double lr,
                              double momentum = 0.9) {
    if (param.rows() != grad.rows() || param.cols() != grad.cols() ||
        param.rows() != velocity.rows() || param.cols() != velocity.cols())
        throw input_error("sgd_momentum_step: shape mismatch");
    if (!grad.allFinite()) throw numeric_error("sgd_momentum_step: non-finite gradient");
    velocity = momentum * velocity + grad;
    param.noalias() -= lr * velocity;
}

// One full training run. The seed drives both the initialization and the
// per-epoch shuffle, so a GRU and a Transformer trained with equal seeds see
// the same data order and share their initial embedding. Checkpoints are
// emitted when the sentence counter crosses a ladder point and at the end of
// every epoch; a ladder point on an epoch boundary is emitted once.
inline TrainRun train(const TrainConfig& config, const SentenceCorpus& corpus) {
    if (corpus.sentences.empty()) throw input_error("train: empty corpus");
    config.validate(corpus.sentences.size());
    const double lr0 = config.initial_lr > 0.0 ? config.initial_lr : default_initial_lr(config.spec.kind);

    TrainRun run;
    run.config = config;
    ModelCheckpoint model = init_model(config.spec, config.seed);
    std::vector<Mat> velocity;
    velocity.reserve(model.tensors.size());
    for (const auto& [name, m] : model.tensors) velocity.push_back(Mat::Zero(m.rows(), m.cols()));

    const std::uint64_t corpus_size = corpus.sentences.size();
    std::uint64_t seen = 0;
    std::size_t next_ladder = 0;

    auto emit = [&](const std::string& tag) {
        ModelCheckpoint snap = model;
        snap.sentences_seen = seen;
        snap.tag = tag;
        run.checkpoints.push_back(std::move(snap));
    };

    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        const auto epoch_batches =
            batches(corpus, config.batch_size, mix_seed(config.seed, 0x2 + static_cast<std::uint64_t>(epoch)));
        for (std::size_t bi = 0; bi < epoch_batches.size(); ++bi) {
            const Minibatch& mb = epoch_batches[bi];
            const double lr = lr_at(seen, corpus_size, lr0);

            Tape tape;
            const auto params = record_parameters(tape, model, true);
            const int loss = lm_loss_graph(tape, model, params, mb);
            const double loss_value = tape.value(loss)(0, 0);
            if (!std::isfinite(loss_value))
                throw numeric_error("train: NaN loss at batch " + std::to_string(run.loss_trace.size()));
            run.loss_trace.push_back(loss_value);
            tape.backward(loss);
            for (std::size_t p = 0; p < model.tensors.size(); ++p) {
                const Mat& g = tape.grad(params[p]);
                if (!g.allFinite())
                    throw numeric_error("train: non-finite gradient in " + model.tensors[p].first +
                                        " at batch " + std::to_string(run.loss_trace.size() - 1));
                sgd_momentum_step(model.tensors[p].second, g, velocity[p], lr, config.momentum);
            }

            seen += static_cast<std::uint64_t>(mb.lengths.size());
            const bool epoch_end = bi + 1 == epoch_batches.size();
            while (next_ladder < config.checkpoint_ladder.size() &&
                   config.checkpoint_ladder[next_ladder] <= seen) {
                const std::uint64_t point = config.checkpoint_ladder[next_ladder];
                ++next_ladder;
                if (epoch_end && point == seen) {
                    emit(std::to_string(point));
                    goto ladder_covers_epoch_end;
                }
                emit(std::to_string(point));
            }
            if (epoch_end) emit("ep" + std::to_string(epoch + 1));
        ladder_covers_epoch_end:;
        }
    }
    return run;
}

}  // namespace lmread
