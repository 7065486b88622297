#include <gtest/gtest.h>

#include <cmath>

#include "fortress/client.hpp"

using namespace fortress;

namespace {

ClientHyper rec_only() {
  ClientHyper h;
  h.lambda_cl = 0.0;
  h.lambda_tcr = 0.0;
  return h;
}

}  // namespace

TEST(RecLoss, TwoItemsZeroEmbeddingsIsLog2) {
  ModelParams p(ModelShape{2, 2});
  const auto r = rec_loss(p, ItemSeq{0, 1});
  EXPECT_NEAR(r.loss, std::log(2.0), 1e-15);
}

TEST(RecLoss, ShortSequenceRejected) {
  const ModelParams p = init_params({4, 3}, 1);
  EXPECT_THROW(rec_loss(p, ItemSeq{1}), std::invalid_argument);
}

TEST(RecLoss, OverfitsOneSequence) {
  ModelParams p = init_params({8, 8}, 3);
  const ItemSeq seq{2, 5, 7};
  for (int s = 0; s < 200; ++s) {
    auto r = rec_loss(p, seq);
    clip_global_norm(r.grad.values(), 5.0);
    p.add_scaled(-0.5, r.grad);
  }
  EXPECT_LT(rec_loss(p, seq).loss, 0.1);
}

TEST(SequenceView, FrozenViewsFiniteDifferences) {
  const ModelParams p = init_params({7, 4}, 5);
  const ItemSeq seq{0, 4, 2, 6, 1, 3};
  Rng rng(8);
  const auto views = draw_sequence_views(seq, AugmentationPolicy{}, 3, 7, rng);
  ModelParams g(p.shape());
  sequence_view_loss_into(p, views, 0.5, g, 1.0);
  auto f = [&](const ModelParams& q) {
    ModelParams sink(q.shape());
    return sequence_view_loss_into(q, views, 0.5, sink, 1.0);
  };
  EXPECT_LT(finite_diff_check(f, p, g, 1e-6), 1e-4);
}

TEST(SequenceView, NegativesAreDerangements) {
  Rng rng(2);
  const ItemSeq seq{0, 1, 2, 3, 4};
  for (int t = 0; t < 50; ++t) {
    const ItemSeq d = derange(seq, rng);
    for (std::size_t i = 0; i < seq.size(); ++i) EXPECT_NE(d[i], seq[i]);
  }
}

TEST(UserView, FrozenNoiseFiniteDifferences) {
  const ModelParams p = init_params({7, 4}, 6);
  const ItemSeq seq{3, 1, 4, 0};
  Rng rng(9);
  const auto noise = draw_user_noise(4, 0.1, 4, rng);
  ModelParams g(p.shape());
  user_view_loss_into(p, seq, noise, 0.5, g, 1.0);
  auto f = [&](const ModelParams& q) {
    ModelParams sink(q.shape());
    return user_view_loss_into(q, seq, noise, 0.5, sink, 1.0);
  };
  EXPECT_LT(finite_diff_check(f, p, g, 1e-6), 1e-4);
}

// Zero noise makes every view identical: all similarities are 1.
TEST(UserView, ZeroSigmaGivesLogOnePlusNegatives) {
  const ModelParams p = init_params({7, 4}, 6);
  Rng rng(1);
  const auto r = user_view_loss(p, ItemSeq{3, 1, 4}, 0.0, 0.5, rng, 4);
  EXPECT_NEAR(r.loss, std::log(5.0), 1e-12);
}

TEST(ItemView, FrozenPerturbationFiniteDifferences) {
  const ModelParams p = init_params({7, 4}, 7);
  const ItemSeq seq{2, 5, 1, 5, 6};
  Rng rng(3);
  const auto rec = rec_loss(p, seq);
  const auto pert = make_item_view_perturbation(seq, rec.grad, 0.1, rng);
  EXPECT_EQ(pert.items, (ItemSeq{2, 5, 1, 6}));
  ModelParams g(p.shape());
  item_view_loss_into(p, pert, 0.5, g, 1.0);
  auto f = [&](const ModelParams& q) {
    ModelParams sink(q.shape());
    return item_view_loss_into(q, pert, 0.5, sink, 1.0);
  };
  EXPECT_LT(finite_diff_check(f, p, g, 1e-6), 1e-4);
}

TEST(ItemView, SingleDistinctItemIsZero) {
  const ModelParams p = init_params({7, 4}, 7);
  Rng rng(3);
  EXPECT_EQ(item_view_loss(p, ItemSeq{2, 2, 2}, 0.1, 0.5, rng).loss, 0.0);
}

TEST(Tcr, FiniteDifferences) {
  const ModelParams p = init_params({7, 4}, 8);
  const ItemSeq seq{0, 1, 2, 3, 4, 5, 6};
  const auto r = tcr_loss(p, seq, 3);
  EXPECT_GT(r.loss, 0.0);
  auto f = [&](const ModelParams& q) { return tcr_loss(q, seq, 3).loss; };
  EXPECT_LT(finite_diff_check(f, p, r.grad, 1e-6), 1e-4);
}

TEST(Tcr, ConstantSequenceIsZero) {
  const ModelParams p = init_params({7, 4}, 8);
  const auto r = tcr_loss(p, ItemSeq{4, 4, 4, 4, 4}, 3);
  EXPECT_EQ(r.loss, 0.0);
  EXPECT_EQ(r.grad.l2_norm(), 0.0);
}

TEST(Tcr, ClosedFormSquaredDistance) {
  const ModelParams p = init_params({7, 4}, 8);
  const ItemSeq seq{1, 2, 3, 4};
  const double oracle = squared_distance(encode(p, ItemSeq{1, 2}).h, encode(p, ItemSeq{2, 3}).h);
  EXPECT_DOUBLE_EQ(tcr_loss(p, ItemSeq{1, 2, 3}, 5).loss, oracle);
  EXPECT_DOUBLE_EQ(tcr_loss(p, seq, 2).loss,
                   squared_distance(encode(p, ItemSeq{2, 3}).h, encode(p, ItemSeq{3, 4}).h));
}

TEST(LocalTrain, RecOnlyLossDecreases) {
  const ModelParams p = init_params({20, 8}, 2);
  ClientHyper h = rec_only();
  h.lr = 0.1;
  h.local_epochs = 6;
  Rng rng(1);
  const auto r = local_train(p, ItemSeq{3, 7, 1, 9, 12, 4}, h, 0, 1, rng);
  ASSERT_TRUE(r.update.has_value());
  ASSERT_EQ(r.epochs.size(), 6u);
  for (std::size_t e = 1; e < r.epochs.size(); ++e) EXPECT_LT(r.epochs[e].rec, r.epochs[e - 1].rec);
}

TEST(LocalTrain, RecOnlyDrawsNoRandomNumbers) {
  const ModelParams p = init_params({20, 8}, 2);
  Rng rng(1), untouched(1);
  local_train(p, ItemSeq{3, 7, 1}, rec_only(), 0, 1, rng);
  EXPECT_EQ(rng.next_u64(), untouched.next_u64());
}

TEST(LocalTrain, DeterministicForSameSeed) {
  const ModelParams p = init_params({20, 8}, 2);
  const ClientHyper h;
  const ItemSeq train{3, 7, 1, 9, 12, 4, 0, 5};
  Rng a(client_seed(1, 4, 17)), b(client_seed(1, 4, 17));
  const auto ra = local_train(p, train, h, 17, 4, a);
  const auto rb = local_train(p, train, h, 17, 4, b);
  ASSERT_TRUE(ra.update && rb.update);
  EXPECT_EQ(ra.update->update.params, rb.update->update.params);
  EXPECT_NE(ra.update->update.params, p);
}

TEST(LocalTrain, ReportsWeightAndIdentity) {
  const ModelParams p = init_params({20, 8}, 2);
  ClientHyper h = rec_only();
  Rng rng(1);
  auto r = local_train(p, ItemSeq{3, 7, 1, 9}, h, 11, 2, rng);
  EXPECT_EQ(r.update->update.weight, 4u);
  EXPECT_EQ(r.update->update.client_id, 11u);
  EXPECT_EQ(r.update->provenance, Provenance::kBenign);
  h.weight_by = WeightBy::kSamples;
  r = local_train(p, ItemSeq{3, 7, 1, 9}, h, 11, 2, rng);
  EXPECT_EQ(r.update->update.weight, 3u);
}

TEST(LocalTrain, ShortHistoryFailsWithoutThrowing) {
  const ModelParams p = init_params({20, 8}, 2);
  Rng rng(1);
  const auto r = local_train(p, ItemSeq{3}, rec_only(), 5, 1, rng);
  EXPECT_FALSE(r.update.has_value());
  EXPECT_NE(r.failure.find("client 5"), std::string::npos);
}

TEST(LocalTrain, ZeroEpochsRejected) {
  const ModelParams p = init_params({20, 8}, 2);
  ClientHyper h;
  h.local_epochs = 0;
  Rng rng(1);
  EXPECT_THROW(local_train(p, ItemSeq{3, 7}, h, 0, 1, rng), InvalidHyperparameter);
  EXPECT_THROW(validate(h), InvalidHyperparameter);
}

TEST(Validate, RejectsBadValues) {
  ClientHyper h;
  EXPECT_NO_THROW(validate(h));
  h.tau = 0.0;
  EXPECT_THROW(validate(h), InvalidHyperparameter);
  h = ClientHyper{};
  h.lambda_cl = -0.1;
  EXPECT_THROW(validate(h), InvalidHyperparameter);
}
