#include <doctest.h>

#include "comvit/config.hpp"
#include "comvit/errors.hpp"

using namespace comvit;

TEST_CASE("presets") {
  const RunConfig paper = paper_preset();
  CHECK(paper.model == ModelConfig{});
  CHECK(paper.train == TrainConfig{});
  const RunConfig desk = desk_preset();
  CHECK(desk.model.image_size == 64);
  CHECK(desk.model.num_classes == 2);
  CHECK(desk.train.epochs == 20);
  CHECK(desk.train.batch_size == 64);
  CHECK_NOTHROW(desk.model.validate());
  CHECK_NOTHROW(desk.train.validate());
  CHECK(preset("desk") == desk);
  CHECK_THROWS_AS(preset("huge"), ConfigError);
}

TEST_CASE("settings by dotted key") {
  RunConfig c = paper_preset();
  apply_setting(c, "model.layers", "3");
  apply_setting(c, "train.base_lr", "2.5e-4");
  apply_setting(c, "model.diagonal_mask", "false");
  apply_setting(c, "train.hflip", "0");
  CHECK(c.model.layers == 3);
  CHECK(c.train.base_lr == 2.5e-4);
  CHECK_FALSE(c.model.diagonal_mask);
  CHECK_FALSE(c.train.hflip);
  CHECK_THROWS_AS(apply_setting(c, "model.colour", "1"), ConfigError);
  CHECK_THROWS_AS(apply_setting(c, "model.layers", "three"), ConfigError);
  CHECK_THROWS_AS(apply_setting(c, "model.layers", "-1"), ConfigError);
  CHECK_THROWS_AS(apply_setting(c, "train.base_lr", "1e-3x"), ConfigError);
}

TEST_CASE("config text roundtrips through render") {
  RunConfig c = desk_preset();
  apply_config_text(c, "# tuned\nmodel.hidden = 96\n\ntrain.weight_decay=0.01  # less\n");
  CHECK(c.model.hidden == 96);
  CHECK(c.train.weight_decay == 0.01);
  RunConfig back = paper_preset();
  apply_config_text(back, render_config(c));
  CHECK(back == c);
  CHECK_THROWS_AS(apply_config_text(c, "model.hidden\n"), ConfigError);
  CHECK(config_keys().size() >= 36);
}
