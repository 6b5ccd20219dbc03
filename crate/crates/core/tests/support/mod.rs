pub mod small_instance;
